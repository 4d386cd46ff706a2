//! Brute-force references for the guarantees, kept on code paths separate
//! from the production modules: a plain forward DP at arbitrary p, exhaustive
//! path enumeration, binomial tails by direct summation, Clopper–Pearson by
//! bisection and explicit interval unions. [`verify_suite`] runs every check
//! and reports one row per check.

use serde::Serialize;

use crate::boundary::{lemma1_envelope, BoundaryTable};
use crate::engine::{advance_all, StreamState};
use crate::error::{Error, Result};
use crate::interval::{clopper_pearson, interval_infty, interval_union, Interval};
use crate::joint_test::{binomial_upper_tail, test_statistics};
use crate::samplers::{
    exact_permutation_pvalue, simulate_dataset, stream_rng, SamplerSpec, SeedDomain, StreamFactory,
};
use crate::spending::SpendingSchedule;

/// Boundaries (L_t, U_t) for t = 1..=len, read off a production table.
pub fn boundaries_of(table: &mut BoundaryTable, t_max: u64) -> Result<Vec<(i64, i64)>> {
    table.extend_to(t_max)?;
    Ok((1..=t_max)
        .map(|t| (table.lower(t), table.upper(t)))
        .collect())
}

/// Forward DP of S_t under Bernoulli(p) steps with absorption at given boundaries.
#[derive(Debug, Clone)]
pub struct ExactDp {
    pub p: f64,
    pub t: u64,
    /// P(S_t = s, τ > t) for s = 0..=t.
    pub dist: Vec<f64>,
    pub absorbed_upper: f64,
    pub absorbed_lower: f64,
}

impl ExactDp {
    pub fn new(p: f64) -> Self {
        Self {
            p,
            t: 0,
            dist: vec![1.0],
            absorbed_upper: 0.0,
            absorbed_lower: 0.0,
        }
    }

    /// One untruncated step; returns h_t(s) for s = 0..=t.
    pub fn propagate(&mut self) -> &[f64] {
        let mut next = vec![0.0; self.dist.len() + 1];
        for (s, &m) in self.dist.iter().enumerate() {
            next[s] += m * (1.0 - self.p);
            next[s + 1] += m * self.p;
        }
        self.dist = next;
        self.t += 1;
        &self.dist
    }

    /// Removes the mass at s ≥ upper and s ≤ lower.
    pub fn absorb(&mut self, lower: i64, upper: i64) {
        for (s, m) in self.dist.iter_mut().enumerate() {
            let s = s as i64;
            if s >= upper {
                self.absorbed_upper += *m;
                *m = 0.0;
            } else if s <= lower {
                self.absorbed_lower += *m;
                *m = 0.0;
            }
        }
    }

    pub fn alive(&self) -> f64 {
        self.dist.iter().sum()
    }
}

/// Cumulative absorption probabilities by each t.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossingProbs {
    pub upper_by_t: Vec<f64>,
    pub lower_by_t: Vec<f64>,
}

pub fn crossing_probs(p: f64, bounds: &[(i64, i64)], t_max: u64) -> CrossingProbs {
    let mut dp = ExactDp::new(p);
    let mut out = CrossingProbs {
        upper_by_t: Vec::with_capacity(t_max as usize),
        lower_by_t: Vec::with_capacity(t_max as usize),
    };
    for &(lower, upper) in bounds.iter().take(t_max as usize) {
        dp.propagate();
        dp.absorb(lower, upper);
        out.upper_by_t.push(dp.absorbed_upper);
        out.lower_by_t.push(dp.absorbed_lower);
    }
    out
}

/// Largest t for which [`enumerate_conditional`] walks all paths.
pub const MAX_ENUMERATION_STEPS: u64 = 22;

/// P(S_t = s | τ > t) for s = 0..=t by walking every surviving path.
pub fn enumerate_conditional(p: f64, bounds: &[(i64, i64)], t: u64) -> Result<Vec<f64>> {
    if t > MAX_ENUMERATION_STEPS {
        return Err(Error::Enumeration(format!(
            "t = {t} exceeds the path-enumeration bound {MAX_ENUMERATION_STEPS}"
        )));
    }
    fn walk(
        p: f64,
        bounds: &[(i64, i64)],
        t: u64,
        step: u64,
        sum: i64,
        weight: f64,
        out: &mut [f64],
    ) {
        if step == t {
            out[sum as usize] += weight;
            return;
        }
        let (lower, upper) = bounds[step as usize];
        for (bit, w) in [(0, 1.0 - p), (1, p)] {
            let s = sum + bit;
            if s > lower && s < upper && w > 0.0 {
                walk(p, bounds, t, step + 1, s, weight * w, out);
            }
        }
    }
    let mut out = vec![0.0; t as usize + 1];
    walk(p, bounds, t, 0, 0, 1.0, &mut out);
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(Error::Conditional {
            t,
            reason: "no surviving path".into(),
        });
    }
    out.iter_mut().for_each(|m| *m /= total);
    Ok(out)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

/// P[Bin(n, p) = k] by logarithms of the product form.
pub fn binom_pmf(n: u64, p: f64, k: u64) -> f64 {
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
}

/// P[Bin(n, p) ≥ k] by direct summation, smallest terms first.
pub fn binom_tail(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let mut terms: Vec<f64> = (k..=n).map(|j| binom_pmf(n, p, j)).collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().min(1.0)
}

fn bisect<F: Fn(f64) -> bool>(below: F) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Clopper–Pearson by bisection on exact binomial tails.
pub fn cp_by_bisection(r: u64, n: u64, gamma: f64) -> Interval {
    let half = gamma / 2.0;
    let low = if r == 0 {
        0.0
    } else {
        bisect(|q| binom_tail(n, q, r) < half)
    };
    let high = if r == n {
        1.0
    } else {
        bisect(|q| 1.0 - binom_tail(n, q, r + 1) > half)
    };
    Interval::new(low, high)
}

/// ∪_{j=r}^{r+u} I_∞(j, r+a+u−j) evaluated member by member.
pub fn explicit_union(r: u64, a: u64, u: u64, gamma: f64, epsilon: f64) -> Result<Interval> {
    let n = r + a + u;
    let mut low = f64::INFINITY;
    let mut high = f64::NEG_INFINITY;
    for j in r..=r + u {
        let iv = interval_infty(j, n - j, gamma, epsilon)?;
        low = low.min(iv.low);
        high = high.max(iv.high);
    }
    Ok(Interval::new(low, high))
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Configuration-dependent parameters of [`verify_suite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub half_life: u64,
    pub t_crossing: u64,
    pub t_minimal: u64,
    /// Streams for the Lemma 2 survival fit; 0 skips it.
    pub lemma2_streams: u64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            epsilon: 1e-4,
            half_life: 1000,
            t_crossing: 2000,
            t_minimal: 500,
            lemma2_streams: 0,
            seed: 1,
        }
    }
}

const SLACK: f64 = 1e-12;

fn table_for(cfg: &VerifyConfig) -> Result<BoundaryTable> {
    BoundaryTable::new(
        cfg.alpha,
        SpendingSchedule::ratio(cfg.epsilon, cfg.half_life)?,
    )
}

/// Both crossing probabilities under p = α stay within ε_t.
pub fn check_crossing(cfg: &VerifyConfig) -> Result<Check> {
    let mut table = table_for(cfg)?;
    let bounds = boundaries_of(&mut table, cfg.t_crossing)?;
    let probs = crossing_probs(cfg.alpha, &bounds, cfg.t_crossing);
    let sched = table.schedule();
    let mut worst = f64::NEG_INFINITY;
    for t in 1..=cfg.t_crossing {
        let eps = sched.epsilon_at(t);
        let i = (t - 1) as usize;
        worst = worst
            .max(probs.upper_by_t[i] - eps)
            .max(probs.lower_by_t[i] - eps);
    }
    Ok(Check::new(
        "boundary crossing ≤ ε_t under p = α",
        worst <= SLACK,
        format!("t ≤ {}, max excess {worst:.3e}", cfg.t_crossing),
    ))
}

/// U_t − 1 and L_t + 1 would each overspend ε_t.
pub fn check_minimality(cfg: &VerifyConfig) -> Result<Check> {
    let mut table = table_for(cfg)?;
    let bounds = boundaries_of(&mut table, cfg.t_minimal)?;
    let sched = *table.schedule();
    let mut dp = ExactDp::new(cfg.alpha);
    let mut failures = Vec::new();
    for (i, &(lower, upper)) in bounds.iter().enumerate() {
        let t = i as u64 + 1;
        let eps = sched.epsilon_at(t);
        let h = dp.propagate().to_vec();
        let tail_from = |j: i64| -> f64 {
            h.iter()
                .enumerate()
                .filter(|(s, _)| *s as i64 >= j)
                .map(|(_, m)| m)
                .sum()
        };
        let head_to = |j: i64| -> f64 {
            h.iter()
                .enumerate()
                .filter(|(s, _)| *s as i64 <= j)
                .map(|(_, m)| m)
                .sum()
        };
        let fits_upper = tail_from(upper) + dp.absorbed_upper <= eps + SLACK;
        let tighter_upper = tail_from(upper - 1) + dp.absorbed_upper > eps - SLACK;
        let fits_lower = head_to(lower) + dp.absorbed_lower <= eps + SLACK;
        let tighter_lower = head_to(lower + 1) + dp.absorbed_lower > eps - SLACK;
        // an unreachable boundary at −1 or t+1 has nothing tighter to compare with
        let upper_ok = fits_upper && (upper - 1 <= lower + 1 || tighter_upper);
        let lower_ok = fits_lower && (lower + 1 >= upper - 1 || tighter_lower);
        if !(upper_ok && lower_ok) && failures.len() < 5 {
            failures.push(t);
        }
        dp.absorb(lower, upper);
    }
    Ok(Check::new(
        "U_t minimal and L_t maximal",
        failures.is_empty(),
        if failures.is_empty() {
            format!("t ≤ {}", cfg.t_minimal)
        } else {
            format!("fails at t = {failures:?}")
        },
    ))
}

/// Steps in 2..=t_max where the literal λ = 1, q = 2 envelope is violated.
pub fn literal_envelope_violations(cfg: &VerifyConfig) -> Result<Vec<u64>> {
    let mut table = table_for(cfg)?;
    table.extend_to(cfg.t_crossing)?;
    let mut bad = Vec::new();
    for t in 2..=cfg.t_crossing {
        let (up, lo) = lemma1_envelope(cfg.alpha, 1.0, 2.0, t)?;
        if table.upper(t) > up || table.lower(t) < lo {
            bad.push(t);
        }
    }
    Ok(bad)
}

/// Lemma 1 envelope with the schedule's valid (λ, q = 2) from t = 2 on.
pub fn check_envelope(cfg: &VerifyConfig) -> Result<Check> {
    let mut table = table_for(cfg)?;
    table.extend_to(cfg.t_crossing)?;
    let mut bad = None;
    for t in 2..=cfg.t_crossing {
        let (up, lo) = table.envelope(t, 2)?;
        if table.upper(t) > up || table.lower(t) < lo {
            bad = Some(t);
            break;
        }
    }
    let literal = literal_envelope_violations(cfg)?;
    let literal_note = match (literal.first(), literal.last()) {
        (Some(a), Some(b)) => format!(
            "; literal λ = 1 bound violated at {} steps in [{a}, {b}]",
            literal.len()
        ),
        _ => "; literal λ = 1 bound holds".into(),
    };
    Ok(Check::new(
        "Lemma 1 envelope",
        bad.is_none(),
        match bad {
            None => format!("2 ≤ t ≤ {}{literal_note}", cfg.t_crossing),
            Some(t) => format!("violated at t = {t}"),
        },
    ))
}

/// Hitting the lower boundary when p = α + 0.02 stays within ε_t.
pub fn check_wrong_decision(cfg: &VerifyConfig) -> Result<Check> {
    let mut table = table_for(cfg)?;
    let bounds = boundaries_of(&mut table, cfg.t_crossing)?;
    let p = (cfg.alpha + 0.02).min(1.0);
    let probs = crossing_probs(p, &bounds, cfg.t_crossing);
    let total_upper_at_alpha = *crossing_probs(cfg.alpha, &bounds, cfg.t_crossing)
        .upper_by_t
        .last()
        .unwrap_or(&0.0);
    let sched = table.schedule();
    let worst = (1..=cfg.t_crossing)
        .map(|t| probs.lower_by_t[(t - 1) as usize] - sched.epsilon_at(t))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Check::new(
        "wrong-decision probability ≤ ε",
        worst <= SLACK && total_upper_at_alpha <= cfg.epsilon + SLACK,
        format!(
            "P_α(upper) = {total_upper_at_alpha:.3e}, P_α+0.02(lower by t) − ε_t ≤ {worst:.3e}"
        ),
    ))
}

/// Production alive distribution equals the oracle DP at p = α.
pub fn check_agreement(cfg: &VerifyConfig) -> Result<Check> {
    let mut table = table_for(cfg)?;
    let mut dp = ExactDp::new(cfg.alpha);
    let mut worst = 0.0f64;
    for t in 1..=cfg.t_crossing {
        table.extend_to(t)?;
        dp.propagate();
        dp.absorb(table.lower(t), table.upper(t));
        let (offset, probs) = table.alive_distribution();
        for (s, &m) in dp.dist.iter().enumerate() {
            let k = s as i64 - offset;
            let prod = if k >= 0 && (k as usize) < probs.len() {
                probs[k as usize]
            } else {
                0.0
            };
            worst = worst.max((prod - m).abs());
        }
    }
    Ok(Check::new(
        "alive distribution agrees with oracle DP",
        worst <= 1e-10,
        format!("t ≤ {}, sup-norm {worst:.3e}", cfg.t_crossing),
    ))
}

/// Conditional laws are stochastically increasing in p (Lemma 4).
pub fn check_stochastic_order(cfg: &VerifyConfig) -> Result<Check> {
    let t_max = 15;
    let mut table = BoundaryTable::new(
        cfg.alpha,
        SpendingSchedule::ratio(cfg.epsilon.max(0.05), 20)?,
    )?;
    let bounds = boundaries_of(&mut table, t_max)?;
    let ps = [0.01, cfg.alpha, 0.1, 0.2, 0.5];
    let mut worst = 0.0f64;
    for t in 1..=t_max {
        let dists: Vec<Vec<f64>> = ps
            .iter()
            .map(|&p| enumerate_conditional(p, &bounds, t))
            .collect::<Result<_>>()?;
        for w in dists.windows(2) {
            let (mut c1, mut c2) = (0.0, 0.0);
            for s in 0..=t as usize {
                c1 += w[0][s];
                c2 += w[1][s];
                worst = worst.max(c2 - c1);
            }
        }
    }
    Ok(Check::new(
        "stochastic ordering in p (Lemma 4)",
        worst <= 1e-12,
        format!("t ≤ {t_max}, p ∈ {ps:?}, max CDF inversion {worst:.3e}"),
    ))
}

/// Exact law of (T⁺, T⁻) for independent surviving streams at time t.
fn statistic_laws(
    dists: &[Vec<f64>],
    cond: &crate::boundary::ConditionalDist,
    r: u64,
    a: u64,
    eta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = dists.len();
    let mut plus = vec![0.0; n + 2];
    let mut minus = vec![0.0; n + 2];
    let mut idx = vec![0usize; n];
    loop {
        let mut w = 1.0;
        let mut sums: Vec<i64> = Vec::with_capacity(n);
        for (d, &i) in dists.iter().zip(&idx) {
            w *= d[i];
            sums.push(i as i64);
        }
        if w > 0.0 {
            sums.sort_unstable();
            let (tp, tm) = test_statistics(&sums, cond, r, a, eta);
            if let Some(tp) = tp {
                plus[tp as usize] += w;
            }
            if let Some(tm) = tm {
                minus[tm as usize] += w;
            }
        }
        let mut k = 0;
        loop {
            if k == n {
                return (plus, minus);
            }
            idx[k] += 1;
            if idx[k] < dists[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Largest excess of P[T ≥ c] over the dominating binomial tail.
fn dominance_excess(law: &[f64], size: u64, eta: f64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for c in 0..law.len() {
        let tail: f64 = law[c..].iter().sum();
        worst = worst.max(tail - binomial_upper_tail(size, eta, c as u64));
    }
    worst
}

/// Theorem 2: T⁺ (T⁻) is dominated by Bin(n − r + 1, η) (Bin(n − a + 1, η))
/// when every stream has p > α (p < α).
pub fn check_theorem2(cfg: &VerifyConfig, t_max: u64) -> Result<Check> {
    let alpha = cfg.alpha;
    let high = [alpha + 0.01, 2.0 * alpha, 4.0 * alpha].map(|p: f64| p.min(0.999));
    let low = [alpha / 5.0, 0.6 * alpha, 0.8 * alpha];
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0u64;
    for eps in [cfg.epsilon, 0.05] {
        let mut table = BoundaryTable::new(alpha, SpendingSchedule::ratio(eps, 20)?)?;
        let bounds = boundaries_of(&mut table, t_max)?;
        for t in 1..=t_max {
            let mut snap = BoundaryTable::new(alpha, SpendingSchedule::ratio(eps, 20)?)?;
            snap.extend_to(t)?;
            let cond = snap.conditional_distribution(t)?;
            for (ps, plus_side) in [(&high, true), (&low, false)] {
                for n in 1..=3usize {
                    for combo in multisets(ps.len(), n) {
                        let dists: Vec<Vec<f64>> = combo
                            .iter()
                            .map(|&i| enumerate_conditional(ps[i], &bounds, t))
                            .collect::<Result<_>>()?;
                        for k in 1..=n as u64 {
                            for eta in [0.05, 0.2, 0.5] {
                                let (r, a) = if plus_side { (k, 0) } else { (0, k) };
                                let (lp, lm) = statistic_laws(&dists, &cond, r, a, eta);
                                let law = if plus_side { lp } else { lm };
                                worst = worst.max(dominance_excess(&law, n as u64 - k + 1, eta));
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Check::new(
        "joint-test binomial dominance (Theorem 2)",
        worst <= 1e-12,
        format!("{cases} cases, t ≤ {t_max}, n ≤ 3, max excess {worst:.3e}"),
    ))
}

fn multisets(k: usize, n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in multisets(k, n - 1) {
        let start = rest.last().copied().unwrap_or(0);
        for i in start..k {
            let mut v = rest.clone();
            v.push(i);
            out.push(v);
        }
    }
    out
}

/// Exact coverage of Clopper–Pearson for n ≤ 25 on a 101-point grid.
pub fn check_cp_coverage() -> Result<Check> {
    let mut worst = f64::INFINITY;
    for gamma in [0.01, 0.05] {
        for n in 1..=25u64 {
            let ivs: Vec<Interval> = (0..=n)
                .map(|r| clopper_pearson(r, n, gamma))
                .collect::<Result<_>>()?;
            for i in 0..=100 {
                let p = i as f64 / 100.0;
                let cover: f64 = (0..=n)
                    .filter(|&r| ivs[r as usize].contains(p))
                    .map(|r| binom_pmf(n, p, r))
                    .sum();
                worst = worst.min(cover - (1.0 - gamma));
            }
        }
    }
    Ok(Check::new(
        "Clopper–Pearson coverage ≥ 1 − γ",
        worst >= -1e-12,
        format!("n ≤ 25, min excess coverage {worst:.3e}"),
    ))
}

/// Production Clopper–Pearson against bisection on direct binomial sums.
pub fn check_cp_endpoints() -> Result<Check> {
    let mut worst = 0.0f64;
    for n in [1u64, 2, 5, 10, 37, 100, 500] {
        for r in 0..=n {
            for gamma in [0.01, 0.05, 0.1] {
                let a = clopper_pearson(r, n, gamma)?;
                let b = cp_by_bisection(r, n, gamma);
                worst = worst
                    .max((a.low - b.low).abs())
                    .max((a.high - b.high).abs());
            }
        }
    }
    Ok(Check::new(
        "Clopper–Pearson endpoints match bisection",
        worst <= 1e-10,
        format!("max deviation {worst:.3e}"),
    ))
}

/// Hull equals explicit union, and resolving a stream never widens the interval.
pub fn check_union_and_nesting(max_total: u64) -> Result<Check> {
    let mut hull_fail = None;
    let mut nest_fail = None;
    for gamma in [0.01, 0.05] {
        for eps in [0.0, 1e-4] {
            for total in 0..=max_total {
                for r in 0..=total {
                    for a in 0..=total - r {
                        let u = total - r - a;
                        let hull = interval_union(r, a, u, gamma, eps)?;
                        if total > 0 && hull != explicit_union(r, a, u, gamma, eps)? {
                            hull_fail.get_or_insert((r, a, u));
                        }
                        if u > 0 {
                            let p = interval_union(r + 1, a, u - 1, gamma, eps)?;
                            let q = interval_union(r, a + 1, u - 1, gamma, eps)?;
                            if !p.is_subset_of(&hull) || !q.is_subset_of(&hull) {
                                nest_fail.get_or_insert((r, a, u));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Check::new(
        "interval hull = union, nesting",
        hull_fail.is_none() && nest_fail.is_none(),
        match (hull_fail, nest_fail) {
            (None, None) => format!("r + a + u ≤ {max_total}, γ ∈ {{0.01, 0.05}}, ε ∈ {{0, 1e-4}}"),
            (h, n) => format!("hull mismatch at {h:?}, nesting failure at {n:?}"),
        },
    ))
}

/// Direct binomial summation against the incomplete-beta form.
pub fn check_binomial_tails() -> Check {
    let mut worst = 0.0f64;
    for (n, p) in [(10u64, 0.3), (100, 0.05), (1000, 0.5), (57, 0.9)] {
        for k in 0..=n + 1 {
            let a = binom_tail(n, p, k);
            let b = binomial_upper_tail(n, p, k);
            worst = worst.max((a - b).abs() / b.clamp(1e-300, 1.0).max(a));
        }
    }
    Check::new(
        "binomial tails: direct sum vs incomplete beta",
        worst <= 1e-9,
        format!("max relative deviation {worst:.3e}"),
    )
}

/// ε_t − ε_{t−1} ≥ λ t⁻² up to t = 10⁶ with the schedule-reported λ from t = 1.
pub fn check_spending_increment(cfg: &VerifyConfig) -> Result<Check> {
    let sched = SpendingSchedule::ratio(cfg.epsilon, cfg.half_life)?;
    let bound = sched.increment_bound(1);
    let below = |lambda: f64| {
        (bound.from_step..=1_000_000u64)
            .find(|&t| sched.increment_at(t) < lambda / (t as f64 * t as f64) * (1.0 - 1e-12))
    };
    let bad = below(bound.lambda);
    let literal = match below(1.0) {
        None => "literal λ = 1 holds".to_string(),
        Some(t) => format!("literal λ = 1 fails from t = {t}"),
    };
    Ok(Check::new(
        "spending increment ≥ λ t⁻²",
        bad.is_none(),
        match bad {
            None => format!("λ = {:.3e}, 1 ≤ t ≤ 10⁶; {literal}", bound.lambda),
            Some(t) => format!("λ = {:.3e} fails at t = {t}", bound.lambda),
        },
    ))
}

/// Slope of log P(τ > t) against log t for uniform p-values, fitted on
/// 20 log-spaced points of [t_lo, t_hi].
pub fn lemma2_survival_slope(cfg: &VerifyConfig, n: u64, t_lo: u64, t_hi: u64) -> Result<f64> {
    let mut table = table_for(cfg)?;
    table.extend_to(t_hi + 1)?;
    let factory = StreamFactory::new(SamplerSpec::Beta { x: 1.0 }, cfg.seed, 1)?;
    let mut streams: Vec<StreamState> = (0..n).map(StreamState::new).collect();
    let mut sources: Vec<_> = (0..n)
        .map(|i| factory.new_stream(SeedDomain::Oracle, i))
        .collect();
    advance_all(&mut streams, &mut sources, &table, t_hi, true, None)
        .map_err(|(_, e)| Error::from(e))?;
    let mut taus: Vec<u64> = streams
        .iter()
        .map(|s| s.tau().unwrap_or(u64::MAX))
        .collect();
    taus.sort_unstable();
    let points: Vec<(f64, f64)> = (0..20)
        .filter_map(|j| {
            let t =
                (t_lo as f64 * (t_hi as f64 / t_lo as f64).powf(j as f64 / 19.0)).round() as u64;
            let alive = n - taus.partition_point(|&x| x <= t) as u64;
            (alive > 0).then(|| ((t as f64).ln(), (alive as f64 / n as f64).ln()))
        })
        .collect();
    if points.len() < 2 {
        return Err(Error::Config(
            "no streams survive the fitting window".into(),
        ));
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub fn check_lemma2(cfg: &VerifyConfig) -> Result<Check> {
    let slope = lemma2_survival_slope(cfg, cfg.lemma2_streams, 1_000, 100_000)?;
    Ok(Check::new(
        "survival decay (Lemma 2), uniform p",
        slope <= -0.4,
        format!(
            "{} streams, slope {slope:.3} on [10³, 10⁵]",
            cfg.lemma2_streams
        ),
    ))
}

/// Monte Carlo frequency of exact permutation p-values ≤ level.
pub fn permutation_power(
    k: usize,
    l: usize,
    effect: f64,
    datasets: u64,
    level: f64,
    seed: u64,
) -> Result<f64> {
    let mut hits = 0u64;
    for i in 0..datasets {
        let mut rng = stream_rng(seed, SeedDomain::Oracle, i);
        let data = simulate_dataset(k, l, effect, 1.0, &mut rng);
        if exact_permutation_pvalue(&data)? <= level {
            hits += 1;
        }
    }
    Ok(hits as f64 / datasets as f64)
}

/// Every check, in a fixed order.
pub fn verify_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut out = vec![
        check_crossing(cfg)?,
        check_minimality(cfg)?,
        check_envelope(cfg)?,
        check_wrong_decision(cfg)?,
        check_agreement(cfg)?,
        check_stochastic_order(cfg)?,
        check_theorem2(cfg, 12)?,
        check_cp_coverage()?,
        check_cp_endpoints()?,
        check_union_and_nesting(30)?,
        check_binomial_tails(),
        check_spending_increment(cfg)?,
    ];
    if cfg.lemma2_streams > 0 {
        out.push(check_lemma2(cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_examples() {
        assert_eq!(binom_tail(10, 0.3, 0), 1.0);
        assert_eq!(binom_tail(10, 0.3, 11), 0.0);
        let v = binom_tail(100, 0.05, 20);
        assert!((v - 1.0523e-7).abs() < 1e-10, "{v}");
        assert!((v - binomial_upper_tail(100, 0.05, 20)).abs() < 1e-15);
    }

    #[test]
    fn cp_closed_forms() {
        let iv = cp_by_bisection(0, 10, 0.05);
        assert_eq!(iv.low, 0.0);
        assert!((iv.high - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-12);
        let iv = cp_by_bisection(5, 10, 0.05);
        assert!((iv.low - 0.18709).abs() < 1e-5 && (iv.high - 0.81291).abs() < 1e-5);
    }

    #[test]
    fn degenerate_dp() {
        let bounds: Vec<(i64, i64)> = (1..=10).map(|t| (-1, t + 1)).collect();
        let pr = crossing_probs(1.0, &bounds, 10);
        assert!(pr.lower_by_t.iter().all(|&x| x == 0.0));
        let bounds: Vec<(i64, i64)> = (1..=10)
            .map(|t| (if t >= 3 { 0 } else { -1 }, t + 1))
            .collect();
        let pr = crossing_probs(0.0, &bounds, 10);
        assert_eq!(pr.lower_by_t[1], 0.0);
        assert_eq!(pr.lower_by_t[2], 1.0);
    }

    #[test]
    fn enumeration_matches_dp_and_production() {
        let mut table =
            BoundaryTable::new(0.05, SpendingSchedule::ratio(0.05, 20).unwrap()).unwrap();
        let bounds = boundaries_of(&mut table, 16).unwrap();
        let first = enumerate_conditional(0.3, &bounds, 1).unwrap();
        assert!((first[0] - 0.7).abs() < 1e-15 && (first[1] - 0.3).abs() < 1e-15);
        let mut dp = ExactDp::new(0.05);
        for &(l, u) in &bounds {
            dp.propagate();
            dp.absorb(l, u);
        }
        let en = enumerate_conditional(0.05, &bounds, 16).unwrap();
        let alive = dp.alive();
        let cond = table.conditional_distribution(16).unwrap();
        for (s, &m) in en.iter().enumerate() {
            assert!((m - dp.dist[s] / alive).abs() < 1e-12);
            assert!((m - cond.pmf(s as i64)).abs() < 1e-10);
        }
    }

    #[test]
    fn explicit_union_example() {
        let u = interval_union(3, 5, 2, 0.01, 1e-4).unwrap();
        assert_eq!(u, explicit_union(3, 5, 2, 0.01, 1e-4).unwrap());
    }

    #[test]
    fn quick_suite_passes() {
        let cfg = VerifyConfig {
            t_crossing: 300,
            t_minimal: 300,
            ..VerifyConfig::default()
        };
        for c in [
            check_crossing(&cfg).unwrap(),
            check_minimality(&cfg).unwrap(),
            check_envelope(&cfg).unwrap(),
            check_wrong_decision(&cfg).unwrap(),
            check_agreement(&cfg).unwrap(),
            check_stochastic_order(&cfg).unwrap(),
            check_theorem2(&cfg, 6).unwrap(),
            check_union_and_nesting(12).unwrap(),
            check_binomial_tails(),
        ] {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn lemma2_slope() {
        let cfg = VerifyConfig::default();
        let slope = lemma2_survival_slope(&cfg, 20_000, 1_000, 100_000).unwrap();
        assert!(slope <= -0.4 && slope > -0.7, "{slope}");
    }
}
