//! Stopping boundaries for a single Bernoulli stream.
//!
//! The table is built forward in t. At every step the surviving mass of the
//! partial sum under p = α is pushed through one Bernoulli(α) step; the upper
//! boundary U_t is the lowest level whose tail (plus mass already spent at
//! the top) fits in ε_t, and L_t the highest level whose lower tail fits.
//! The mass beyond each boundary is then removed and charged to the spent
//! totals, so the surviving distribution f_t(s) = P_α(S_t = s, τ > t) is
//! available for conditional queries at any retained step.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::NeumaierSum;
use crate::spending::SpendingSchedule;

/// One row of boundary output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryRow {
    pub t: u64,
    pub lower: i64,
    pub upper: i64,
    pub spent_lower: f64,
    pub spent_upper: f64,
}

#[derive(Debug, Clone)]
struct AliveSnapshot {
    offset: i64,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundaryTable {
    alpha: f64,
    schedule: SpendingSchedule,
    // index t; entry 0 holds the (trivial) state before the first draw
    upper: Vec<i32>,
    lower: Vec<i32>,
    spent_upper: NeumaierSum,
    spent_lower: NeumaierSum,
    // f_t lives in cur[start..end]; cur[start] is the mass at level `offset`
    cur: Vec<f64>,
    scratch: Vec<f64>,
    start: usize,
    end: usize,
    offset: i64,
    snapshot_stride: Option<u64>,
    requested: BTreeSet<u64>,
    snapshots: BTreeMap<u64, AliveSnapshot>,
    upper_dips: Vec<u64>,
    lower_dips: Vec<u64>,
}

impl BoundaryTable {
    pub fn new(alpha: f64, schedule: SpendingSchedule) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            schedule,
            upper: vec![1],
            lower: vec![-1],
            spent_upper: NeumaierSum::default(),
            spent_lower: NeumaierSum::default(),
            cur: vec![1.0],
            scratch: Vec::new(),
            start: 0,
            end: 1,
            offset: 0,
            snapshot_stride: None,
            requested: BTreeSet::new(),
            snapshots: BTreeMap::new(),
            upper_dips: Vec::new(),
            lower_dips: Vec::new(),
        })
    }

    /// Retain the alive distribution at every multiple of `stride` built from now on.
    pub fn with_snapshot_stride(mut self, stride: u64) -> Self {
        self.snapshot_stride = Some(stride.max(1));
        self
    }

    /// Retain the alive distribution at step `t` once it is built.
    pub fn request_snapshot(&mut self, t: u64) {
        if t == self.extended_to() {
            self.snapshots.insert(t, self.current_snapshot());
        }
        self.requested.insert(t);
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn schedule(&self) -> &SpendingSchedule {
        &self.schedule
    }

    pub fn extended_to(&self) -> u64 {
        (self.upper.len() - 1) as u64
    }

    pub fn upper(&self, t: u64) -> i64 {
        self.upper[t as usize] as i64
    }

    pub fn lower(&self, t: u64) -> i64 {
        self.lower[t as usize] as i64
    }

    pub fn spent_upper(&self) -> f64 {
        self.spent_upper.value()
    }

    pub fn spent_lower(&self) -> f64 {
        self.spent_lower.value()
    }

    /// Σ_s f_t(s) at `extended_to`.
    pub fn alive_mass(&self) -> f64 {
        let mut acc = NeumaierSum::default();
        for &p in &self.cur[self.start..self.end] {
            acc.add(p);
        }
        acc.value()
    }

    /// Levels and masses of f_t at `extended_to`: (lowest level, masses).
    pub fn alive_distribution(&self) -> (i64, &[f64]) {
        (self.offset, &self.cur[self.start..self.end])
    }

    pub fn extend_to(&mut self, t_target: u64) -> Result<()> {
        self.extend_to_with(t_target, |_| {})
    }

    /// Extends the table, reporting every newly built row to `on_row`.
    pub fn extend_to_with<F: FnMut(&BoundaryRow)>(
        &mut self,
        t_target: u64,
        mut on_row: F,
    ) -> Result<()> {
        let from = self.extended_to();
        if t_target <= from {
            return Ok(());
        }
        self.upper.reserve((t_target - from) as usize);
        self.lower.reserve((t_target - from) as usize);
        for t in from + 1..=t_target {
            let row = self.step(t)?;
            on_row(&row);
        }
        Ok(())
    }

    fn step(&mut self, t: u64) -> Result<BoundaryRow> {
        let a = self.alpha;
        let b = 1.0 - a;
        let n = self.end - self.start;
        // every entry of h is written below
        if self.scratch.len() > n + 1 {
            self.scratch.truncate(n + 1);
        } else {
            self.scratch.resize(n + 1, 0.0);
        }
        {
            let f = &self.cur[self.start..self.end];
            let h = &mut self.scratch[..];
            h[0] = b * f[0];
            for ((hj, &fj), &fprev) in h[1..n].iter_mut().zip(&f[1..]).zip(&f[..n - 1]) {
                *hj = b * fj + a * fprev;
            }
            h[n] = a * f[n - 1];
        }
        let h = &self.scratch[..];
        let eps_t = self.schedule.epsilon_at(t);
        let spent_u = self.spent_upper.value();
        let spent_l = self.spent_lower.value();
        if spent_u > eps_t || spent_l > eps_t {
            return Err(Error::Boundary {
                t,
                reason: format!("budget {eps_t:e} below spent mass ({spent_l:e}, {spent_u:e})"),
            });
        }

        // upper: smallest index j with Σ_{i≥j} h_i + spent ≤ ε_t
        let mut tail_u = NeumaierSum::default();
        let mut u_idx = n + 1;
        for j in (0..=n).rev() {
            let mut cand = tail_u;
            cand.add(h[j]);
            if cand.value() + spent_u <= eps_t {
                tail_u = cand;
                u_idx = j;
            } else {
                break;
            }
        }
        // lower: largest index j with Σ_{i≤j} h_i + spent ≤ ε_t (−1 when none)
        let mut tail_l = NeumaierSum::default();
        let mut l_idx: isize = -1;
        for j in 0..u_idx {
            let mut cand = tail_l;
            cand.add(h[j]);
            if cand.value() + spent_l <= eps_t {
                tail_l = cand;
                l_idx = j as isize;
            } else {
                break;
            }
        }
        let alive_from = (l_idx + 1) as usize;
        if alive_from >= u_idx {
            return Err(Error::Boundary {
                t,
                reason: "boundaries meet; no surviving states".into(),
            });
        }
        let upper = self.offset + u_idx as i64;
        let lower = self.offset + l_idx as i64;
        self.spent_upper.add(tail_u.value());
        self.spent_lower.add(tail_l.value());

        let prev_u = *self.upper.last().unwrap();
        let prev_l = *self.lower.last().unwrap();
        if t > 1 && (upper as i32) < prev_u {
            self.upper_dips.push(t);
        }
        if t > 1 && (lower as i32) < prev_l {
            self.lower_dips.push(t);
        }
        self.upper.push(upper as i32);
        self.lower.push(lower as i32);

        std::mem::swap(&mut self.cur, &mut self.scratch);
        self.start = alive_from;
        self.end = u_idx;
        self.offset = lower + 1;

        let keep = self.requested.contains(&t)
            || self.snapshot_stride.is_some_and(|s| t.is_multiple_of(s));
        if keep {
            self.snapshots.insert(t, self.current_snapshot());
        }

        Ok(BoundaryRow {
            t,
            lower,
            upper,
            spent_lower: self.spent_lower.value(),
            spent_upper: self.spent_upper.value(),
        })
    }

    fn current_snapshot(&self) -> AliveSnapshot {
        AliveSnapshot {
            offset: self.offset,
            probs: self.cur[self.start..self.end].to_vec(),
        }
    }

    /// G_t^α(x) = P_α(S_t ≤ x | τ > t).
    pub fn conditional_cdf(&self, t: u64, x: i64) -> Result<f64> {
        Ok(self.conditional_distribution(t)?.cdf(x))
    }

    /// The law of S_t under p = α given τ > t, for a retained or current step.
    pub fn conditional_distribution(&self, t: u64) -> Result<ConditionalDist> {
        let (offset, probs): (i64, &[f64]) = if t == self.extended_to() {
            (self.offset, &self.cur[self.start..self.end])
        } else if let Some(s) = self.snapshots.get(&t) {
            (s.offset, &s.probs)
        } else if t > self.extended_to() {
            return Err(Error::Conditional {
                t,
                reason: format!("table only extended to {}", self.extended_to()),
            });
        } else {
            return Err(Error::Conditional {
                t,
                reason: "step was not retained".into(),
            });
        };
        ConditionalDist::from_masses(t, offset, probs)
    }

    /// Largest k ≤ horizon − t such that a stream at level `sum` after step t
    /// cannot touch either boundary during steps t+1..=t+k, whatever it draws.
    pub fn safe_block(&self, t: u64, sum: i64, horizon: u64) -> u64 {
        let horizon = horizon.min(self.extended_to());
        if horizon <= t {
            return 0;
        }
        let mut k = horizon - t;
        let u_next = self.upper(t + 1);
        let room = u_next - sum - 1;
        if room <= 0 {
            return 0;
        }
        k = k.min(room as u64);
        // boundaries must be monotone over the window for the shortcut below
        for dips in [&self.upper_dips, &self.lower_dips] {
            let i = dips.partition_point(|&d| d <= t + 1);
            if let Some(&d) = dips.get(i) {
                if d <= t + k {
                    k = d - 1 - t;
                }
            }
        }
        if k == 0 {
            return 0;
        }
        let window = &self.lower[(t + 1) as usize..=(t + k) as usize];
        window.partition_point(|&l| (l as i64) < sum) as u64
    }

    /// Lemma-1 style envelope (upper, lower) using the schedule's own increment bound.
    pub fn envelope(&self, t: u64, from_step: u64) -> Result<(i64, i64)> {
        let b = self.schedule.increment_bound(from_step);
        lemma1_envelope(self.alpha, b.lambda, b.q, t)
    }
}

/// ⌈tα + √(t(q ln t − ln λ)/2)⌉ and ⌊tα − √(t(q ln t − ln λ)/2)⌋.
pub fn lemma1_envelope(alpha: f64, lambda: f64, q: f64, t: u64) -> Result<(i64, i64)> {
    if t == 0 {
        return Err(Error::Envelope("t must be positive".into()));
    }
    let tf = t as f64;
    let arg = tf * (q * tf.ln() - lambda.ln()) / 2.0;
    if arg < 0.0 || !arg.is_finite() {
        return Err(Error::Envelope(format!(
            "negative square-root argument at t={t} (λ={lambda}, q={q})"
        )));
    }
    let r = arg.sqrt();
    let centre = tf * alpha;
    Ok(((centre + r).ceil() as i64, (centre - r).floor() as i64))
}

/// Normalised conditional law of S_t given survival.
#[derive(Debug, Clone)]
pub struct ConditionalDist {
    t: u64,
    offset: i64,
    pmf: Vec<f64>,
    // cdf[i] = P(S ≤ offset+i), sf[i] = P(S ≥ offset+i)
    cdf: Vec<f64>,
    sf: Vec<f64>,
}

impl ConditionalDist {
    pub(crate) fn from_masses(t: u64, offset: i64, masses: &[f64]) -> Result<Self> {
        let mut total = NeumaierSum::default();
        for &m in masses {
            total.add(m);
        }
        let total = total.value();
        if !(total > 0.0) {
            return Err(Error::Conditional {
                t,
                reason: "all mass absorbed".into(),
            });
        }
        let pmf: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = NeumaierSum::default();
        for &p in &pmf {
            acc.add(p);
            cdf.push(acc.value().min(1.0));
        }
        let mut sf = vec![0.0; pmf.len()];
        let mut acc = NeumaierSum::default();
        for (i, &p) in pmf.iter().enumerate().rev() {
            acc.add(p);
            sf[i] = acc.value().min(1.0);
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        if let Some(first) = sf.first_mut() {
            *first = 1.0;
        }
        Ok(Self {
            t,
            offset,
            pmf,
            cdf,
            sf,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Lowest level with positive conditional mass.
    pub fn min_level(&self) -> i64 {
        self.offset
    }

    pub fn max_level(&self) -> i64 {
        self.offset + self.pmf.len() as i64 - 1
    }

    pub fn pmf(&self, x: i64) -> f64 {
        if x < self.offset || x > self.max_level() {
            0.0
        } else {
            self.pmf[(x - self.offset) as usize]
        }
    }

    /// P(S ≤ x | τ > t).
    pub fn cdf(&self, x: i64) -> f64 {
        if x < self.offset {
            0.0
        } else if x >= self.max_level() {
            1.0
        } else {
            self.cdf[(x - self.offset) as usize]
        }
    }

    /// P(S ≥ x | τ > t), summed from the top.
    pub fn sf(&self, x: i64) -> f64 {
        if x <= self.offset {
            1.0
        } else if x > self.max_level() {
            0.0
        } else {
            self.sf[(x - self.offset) as usize]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(alpha: f64, eps: f64) -> BoundaryTable {
        BoundaryTable::new(alpha, SpendingSchedule::ratio(eps, 1000).unwrap()).unwrap()
    }

    #[test]
    fn first_step_boundaries_unreachable() {
        let mut tb = table(0.05, 1e-4);
        tb.extend_to(1).unwrap();
        assert_eq!(tb.upper(1), 2);
        assert_eq!(tb.lower(1), -1);
    }

    #[test]
    fn zero_budget_forbids_crossings() {
        // ε_t is astronomically small early on, so nothing can be spent
        let mut tb = table(0.5, 1e-12);
        tb.extend_to(20).unwrap();
        for t in 1..=20 {
            assert_eq!(tb.upper(t), t as i64 + 1, "t={t}");
            assert_eq!(tb.lower(t), -1, "t={t}");
        }
    }

    #[test]
    fn conditional_cdf_at_first_step() {
        let mut tb = table(0.05, 1e-4);
        tb.extend_to(1).unwrap();
        assert!((tb.conditional_cdf(1, 0).unwrap() - 0.95).abs() < 1e-15);
        assert_eq!(tb.conditional_cdf(1, 1).unwrap(), 1.0);
        assert_eq!(tb.conditional_cdf(1, -1).unwrap(), 0.0);
    }

    #[test]
    fn conditional_cdf_below_lower_boundary_is_zero() {
        let mut tb = table(0.05, 1e-4);
        tb.extend_to(50).unwrap();
        let l = tb.lower(50);
        assert_eq!(tb.conditional_cdf(50, l).unwrap(), 0.0);
        let u = tb.upper(50);
        assert_eq!(tb.conditional_cdf(50, u - 1).unwrap(), 1.0);
    }

    #[test]
    fn unretained_step_is_an_error() {
        let mut tb = table(0.05, 1e-4);
        tb.extend_to(10).unwrap();
        assert!(tb.conditional_distribution(5).is_err());
        assert!(tb.conditional_distribution(11).is_err());
        let mut tb = table(0.05, 1e-4).with_snapshot_stride(5);
        tb.request_snapshot(7);
        tb.extend_to(10).unwrap();
        assert!(tb.conditional_distribution(5).is_ok());
        assert!(tb.conditional_distribution(7).is_ok());
        assert!(tb.conditional_distribution(6).is_err());
    }

    #[test]
    fn mass_is_conserved() {
        let mut tb = table(0.05, 1e-4);
        let mut rows = Vec::new();
        tb.extend_to_with(3000, |r| rows.push(*r)).unwrap();
        let total = tb.alive_mass() + tb.spent_upper() + tb.spent_lower();
        assert!((total - 1.0).abs() < 1e-10, "{total}");
        for r in &rows {
            let eps = tb.schedule().epsilon_at(r.t);
            assert!(r.spent_upper <= eps && r.spent_lower <= eps);
            assert!(r.lower < r.upper && r.lower >= -1 && r.upper <= r.t as i64 + 1);
        }
    }

    #[test]
    fn envelope_example() {
        assert_eq!(lemma1_envelope(0.05, 1.0, 2.0, 1000).unwrap(), (134, -34));
        let (u, l) = lemma1_envelope(0.5, 1.0, 2.0, 2).unwrap();
        assert_eq!(u - 1, 1 - l);
        assert!(lemma1_envelope(0.05, 10.0, 2.0, 1).is_err());
        let mut tb = table(0.05, 1e-4);
        tb.extend_to(1000).unwrap();
        assert!(tb.upper(1000) <= 134);
    }

    #[test]
    fn safe_block_never_crosses() {
        let mut tb = table(0.05, 1e-3);
        tb.extend_to(4000).unwrap();
        for t in [0u64, 10, 100, 1000, 3000] {
            for sum in (tb.lower(t) + 1).max(0)..tb.upper(t) {
                let k = tb.safe_block(t, sum, 4000);
                // any path keeps S_{t+j} within [sum, sum + j]
                for j in 1..=k {
                    assert!(sum + (j as i64) < tb.upper(t + j), "t={t} sum={sum} j={j}");
                    assert!(sum > tb.lower(t + j), "t={t} sum={sum} j={j}");
                }
            }
        }
    }
}
