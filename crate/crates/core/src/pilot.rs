//! Pilot sample and the choice of the number of streams.
//!
//! * N_Blind: smallest N whose interval is short enough at the balanced
//!   point with two streams outstanding.
//! * N_Pilot: smallest N such that every outcome with two streams
//!   outstanding gives an admissible interval after intersection with the
//!   pilot interval.
//! * N_Opt: minimiser of the emulated expected effort over a geometric grid
//!   above N_Pilot. Stopping times up to t_max are resampled from the pilot;
//!   later ones follow P[τ > t | τ > t_max] = √((ln t/t)/(ln t_max/t_max)).

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::engine::{
    advance_all, build_pool, ensure_extended, BoundaryCache, Plan, RunConfig, SharedTable, Status,
    StreamState,
};
use crate::error::{Error, Result, SamplerError};
use crate::interval::{interval_union, Interval, UnionCalculator};
use crate::precision::PrecisionRule;
use crate::samplers::{stream_rng, SeedDomain, StreamFactory, StreamSource};

pub const DEFAULT_PILOT_N: u64 = 1000;
pub const DEFAULT_PILOT_TMAX: u64 = 1000;

/// Search limit for N.
const N_LIMIT: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub n: u64,
    pub t_max: u64,
    pub gamma_pilot: f64,
}

impl PilotConfig {
    pub fn new(gamma_pilot: f64) -> Self {
        Self {
            n: DEFAULT_PILOT_N,
            t_max: DEFAULT_PILOT_TMAX,
            gamma_pilot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_max == 0 {
            return Err(Error::Config("pilot needs n ≥ 1 and t_max ≥ 1".into()));
        }
        if !(self.gamma_pilot > 0.0 && self.gamma_pilot < 1.0) {
            return Err(Error::Config(format!(
                "gamma_pilot must lie in (0,1), got {}",
                self.gamma_pilot
            )));
        }
        Ok(())
    }
}

/// Constants of the N_Opt emulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub grid_points: usize,
    pub replicates: usize,
    /// n_hi = factor · N_Blind.
    pub n_hi_factor: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            grid_points: 25,
            replicates: 200,
            n_hi_factor: 4.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points == 0 || self.replicates == 0 || !(self.n_hi_factor >= 1.0) {
            return Err(Error::Config(
                "planner needs grid_points ≥ 1, replicates ≥ 1 and n_hi_factor ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSummary {
    pub n: u64,
    pub t_max: u64,
    pub positives: u64,
    pub negatives: u64,
    pub unresolved: u64,
    pub gamma_pilot: f64,
    pub epsilon: f64,
    pub interval: Interval,
    /// Sorted stopping times of the resolved pilot streams.
    pub resolved_times: Vec<u64>,
    pub beta_hat: f64,
    pub survival_at_tmax: f64,
    pub effort: u64,
}

impl PilotSummary {
    /// Builds the summary from final pilot stream states.
    pub fn from_streams(
        streams: &[StreamState],
        t_max: u64,
        gamma_pilot: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let n = streams.len() as u64;
        let positives = streams
            .iter()
            .filter(|s| s.status == Status::Positive)
            .count() as u64;
        let negatives = streams
            .iter()
            .filter(|s| s.status == Status::Negative)
            .count() as u64;
        let unresolved = n - positives - negatives;
        let mut resolved_times: Vec<u64> = streams.iter().filter_map(|s| s.tau()).collect();
        resolved_times.sort_unstable();
        let effort = resolved_times.iter().sum::<u64>() + unresolved * t_max;
        Ok(Self {
            n,
            t_max,
            positives,
            negatives,
            unresolved,
            gamma_pilot,
            epsilon,
            interval: interval_union(positives, negatives, unresolved, gamma_pilot, epsilon)?,
            resolved_times,
            beta_hat: (positives as f64 + 0.5) / ((positives + negatives) as f64 + 1.0),
            survival_at_tmax: unresolved as f64 / n as f64,
            effort,
        })
    }
}

/// Runs the pilot with the process-wide boundary cache.
pub fn run_pilot(config: &RunConfig, factory: &StreamFactory) -> Result<PilotSummary> {
    let pc = config
        .pilot
        .ok_or_else(|| Error::Config("no pilot configured".into()))?;
    pc.validate()?;
    let stride = config.joint.as_ref().map(|j| j.stride);
    let table = BoundaryCache::global().table(config.alpha, config.schedule()?, stride)?;
    let pool = build_pool(config.workers)?;
    Ok(run_pilot_on(&pc, config, factory, &table, pool.as_ref())?)
}

pub(crate) fn run_pilot_on(
    pc: &PilotConfig,
    config: &RunConfig,
    factory: &StreamFactory,
    table: &SharedTable,
    pool: Option<&rayon::ThreadPool>,
) -> Result<PilotSummary, SamplerError> {
    ensure_extended(table, pc.t_max + 1).map_err(|e| SamplerError::Io(e.to_string()))?;
    let mut streams: Vec<StreamState> = (0..pc.n).map(StreamState::new).collect();
    let mut sources: Vec<StreamSource> = (0..pc.n)
        .map(|i| factory.new_stream(SeedDomain::Pilot, i))
        .collect();
    {
        let guard = table.read().unwrap_or_else(|e| e.into_inner());
        advance_all(
            &mut streams,
            &mut sources,
            &guard,
            pc.t_max,
            config.block_skipping,
            pool,
        )
        .map_err(|(_, e)| e)?;
    }
    PilotSummary::from_streams(&streams, pc.t_max, pc.gamma_pilot, config.epsilon())
        .map_err(|e| SamplerError::Io(e.to_string()))
}

/// |I(⌊(N−2)/2⌋, ⌈(N−2)/2⌉, 2)|, or the vacuous interval for N < 2.
pub fn balanced_length(n: u64, gamma: f64, epsilon: f64) -> Result<f64> {
    if n < 2 {
        return Ok(interval_union(0, 0, n, gamma, epsilon)?.length());
    }
    let m = n - 2;
    Ok(interval_union(m / 2, m - m / 2, 2, gamma, epsilon)?.length())
}

/// Smallest N with `ok(N)`, assuming `ok` is monotone, by doubling and bisection.
fn smallest<F: FnMut(u64) -> Result<bool>>(mut ok: F) -> Result<u64> {
    if ok(1)? {
        return Ok(1);
    }
    let mut lo = 1;
    let mut hi = 2;
    while !ok(hi)? {
        lo = hi;
        hi *= 2;
        if hi > N_LIMIT {
            return Err(Error::NoFeasibleN { limit: N_LIMIT });
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// N_Blind for a fixed maximal length Δ.
pub fn n_blind(delta: f64, gamma: f64, epsilon: f64) -> Result<u64> {
    let rule = PrecisionRule::fixed(delta);
    rule.validate()?;
    smallest(|n| {
        let len = balanced_length(n, gamma, epsilon)?;
        Ok(rule.admits(&Interval::new(0.0, len)))
    })
}

/// Whether every r ∈ 0..=N−2 yields an admissible I(r, N−2−r, 2) ∩ pilot.
pub fn all_outcomes_admissible(
    n: u64,
    rule: &PrecisionRule,
    gamma: f64,
    epsilon: f64,
    pilot: Interval,
) -> Result<bool> {
    if n < 2 {
        return Ok(rule.admits(&pilot));
    }
    let m = n - 2;
    let mut calc = UnionCalculator::new(n, gamma, epsilon)?;
    // outcomes whose interval misses the pilot interval contribute a point
    let first = partition(0, m + 1, |r| calc.union(r, m - r, 2).high < pilot.low);
    let last = partition(first, m + 1, |r| calc.union(r, m - r, 2).low <= pilot.high);
    for r in first..last {
        let iv = calc.union(r, m - r, 2);
        let x = Interval::new(iv.low.max(pilot.low), iv.high.min(pilot.high));
        if !rule.admits(&x) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// First r in [lo, hi) where `pred` turns false (pred must be true-then-false).
fn partition<F: FnMut(u64) -> bool>(mut lo: u64, mut hi: u64, mut pred: F) -> u64 {
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Smallest N for which every outcome with two streams outstanding is admissible.
pub fn n_required(rule: &PrecisionRule, gamma: f64, epsilon: f64, pilot: Interval) -> Result<u64> {
    if let PrecisionRule::Fixed { delta } = rule {
        if pilot == Interval::FULL {
            return n_blind(*delta, gamma, epsilon);
        }
    }
    smallest(|n| all_outcomes_admissible(n, rule, gamma, epsilon, pilot))
}

/// N_Pilot at the main-run level `gamma_main`.
pub fn n_pilot(
    pilot: &PilotSummary,
    rule: &PrecisionRule,
    gamma_main: f64,
    epsilon: f64,
) -> Result<u64> {
    n_required(rule, gamma_main, epsilon, pilot.interval)
}

/// P[τ > t | τ > t_max] under the fitted tail.
pub fn tail_survival(t: f64, t_max: f64) -> f64 {
    if t <= t_max {
        return 1.0;
    }
    ((t.ln() / t) / (t_max.ln() / t_max)).sqrt()
}

/// Inverse of [`tail_survival`]: the t > t_max with survival v ∈ (0, 1].
pub fn tail_quantile(v: f64, t_max: f64) -> f64 {
    tail_quantile_ln(v.ln(), t_max.ln() - (t_max.ln()).ln())
}

/// [`tail_quantile`] from ln v and k = ln t_max − ln ln t_max.
fn tail_quantile_ln(ln_v: f64, k: f64) -> f64 {
    solve_tail(k - 2.0 * ln_v).exp()
}

/// Larger root x of x − ln x = c; ln t/t = v²·ln t_max/t_max becomes this with x = ln t.
fn solve_tail(c: f64) -> f64 {
    if c <= 1.0 {
        return 1.0;
    }
    let lc = c.ln();
    let mut x = c + lc + lc / c;
    for _ in 0..20 {
        let step = (x - x.ln() - c) * x / (x - 1.0);
        x -= step;
        if step.abs() <= 1e-13 * x {
            break;
        }
    }
    x
}

/// Cubic Hermite table of [`solve_tail`] on [c0, c0 + span], using x′ = x/(x − 1).
struct TailTable {
    k: f64,
    inv_h: f64,
    h: f64,
    xs: Vec<f64>,
}

impl TailTable {
    const SPAN: f64 = 96.0;
    const PER_UNIT: f64 = 32.0;

    fn new(t_max: f64) -> Self {
        let k = t_max.ln() - t_max.ln().ln();
        let h = 1.0 / Self::PER_UNIT;
        let n = (Self::SPAN * Self::PER_UNIT) as usize + 1;
        let xs = (0..n).map(|i| solve_tail(k + i as f64 * h)).collect();
        Self {
            k,
            inv_h: Self::PER_UNIT,
            h,
            xs,
        }
    }

    /// τ with ln S(τ) = ln_v, before rounding.
    fn quantile(&self, ln_v: f64) -> f64 {
        let c = self.k - 2.0 * ln_v;
        let u = (c - self.k) * self.inv_h;
        let i = u as usize;
        if u < 0.0 || i + 1 >= self.xs.len() {
            return solve_tail(c).exp();
        }
        let s = u - i as f64;
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let (d0, d1) = (self.h * x0 / (x0 - 1.0), self.h * x1 / (x1 - 1.0));
        let s2 = s * s;
        let s3 = s2 * s;
        let x = (2.0 * s3 - 3.0 * s2 + 1.0) * x0
            + (s3 - 2.0 * s2 + s) * d0
            + (-2.0 * s3 + 3.0 * s2) * x1
            + (s3 - s2) * d1;
        x.exp()
    }
}

/// Expected-effort estimate at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffortEstimate {
    pub n: u64,
    pub mean_effort: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NOptEstimate {
    pub n: u64,
    pub grid: Vec<EffortEstimate>,
}

/// Geometric grid of `points` integers from `lo` to `hi`, deduplicated.
pub fn geometric_grid(lo: u64, hi: u64, points: usize) -> Vec<u64> {
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    let ratio = (hi as f64 / lo as f64).ln();
    let mut grid: Vec<u64> = (0..points)
        .map(|j| {
            let v = (lo as f64) * (ratio * j as f64 / (points - 1) as f64).exp();
            (v.round() as u64).clamp(lo, hi)
        })
        .collect();
    grid.dedup();
    grid
}

struct Emulator<'a> {
    pilot: &'a PilotSummary,
    rule: &'a PrecisionRule,
    tail: TailTable,
}

impl<'a> Emulator<'a> {
    fn new(pilot: &'a PilotSummary, rule: &'a PrecisionRule) -> Self {
        Self {
            pilot,
            rule,
            tail: TailTable::new(pilot.t_max as f64),
        }
    }

    /// Effort of one emulated run with `n` streams.
    fn replicate<R: Rng>(&self, n: u64, calc: &mut UnionCalculator, rng: &mut R) -> f64 {
        let beta = self.pilot.beta_hat;
        let times = &self.pilot.resolved_times;
        // streams resolving by t_max pick a pilot stopping time uniformly
        let early = draw_binomial(n, times.len() as f64 / self.pilot.n as f64, rng);
        let mut counts = vec![(0u64, 0u64); times.len()];
        for _ in 0..early {
            let c = &mut counts[rng.random_range(0..times.len())];
            if rng.random_bool(beta) {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        // (time, positives, negatives) in time order
        let mut events: Vec<(f64, u64, u64)> =
            Vec::with_capacity(times.len() + (n - early) as usize);
        for (&t, &(pos, neg)) in times.iter().zip(&counts) {
            if pos + neg == 0 {
                continue;
            }
            match events.last_mut() {
                Some(e) if e.0 == t as f64 => {
                    e.1 += pos;
                    e.2 += neg;
                }
                _ => events.push((t as f64, pos, neg)),
            }
        }
        let remaining = n - early;
        // tail streams, generated in increasing order of τ via descending uniform order statistics
        let t_max = self.pilot.t_max as f64;
        let mut ln_v = 0.0f64;
        for k in (1..=remaining).rev() {
            // ln of the next uniform order statistic from the top
            ln_v += (1.0 - rng.random::<f64>()).ln() / k as f64;
            let tau = self.tail.quantile(ln_v).max(t_max).ceil();
            let pos = rng.random_bool(beta) as u64;
            events.push((tau, pos, 1 - pos));
        }
        emulated_effort(&events, n, calc, self.rule, self.pilot.interval).0
    }
}

/// Effort of a run with `n` streams whose resolutions are `events`
/// (time, positives, negatives) in increasing time order; the run stops at the
/// first event after which the union interval, intersected with `pilot`, is
/// admissible, or at the last event. Returns the effort and the index of the
/// stopping event.
pub(crate) fn emulated_effort(
    events: &[(f64, u64, u64)],
    n: u64,
    calc: &mut UnionCalculator,
    rule: &PrecisionRule,
    pilot: Interval,
) -> (f64, usize) {
    if events.is_empty() {
        return (0.0, 0);
    }
    let mut prefix = Vec::with_capacity(events.len());
    let (mut r, mut a) = (0u64, 0u64);
    for e in events {
        r += e.1;
        a += e.2;
        prefix.push((r, a));
    }
    let mut admits = |k: usize| {
        let (r, a) = prefix[k];
        let iv = calc.union(r, a, n - r - a);
        let lo = iv.low.max(pilot.low);
        let hi = iv.high.min(pilot.high);
        lo > hi || rule.admits(&Interval::new(lo, hi))
    };
    let last = events.len() - 1;
    let stop = if !admits(last) {
        last
    } else {
        let (mut lo, mut hi) = (0usize, last);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if admits(mid) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    };
    let t_star = events[stop].0;
    let (r, a) = prefix[stop];
    let done: f64 = events[..=stop]
        .iter()
        .map(|e| e.0 * (e.1 + e.2) as f64)
        .sum();
    (done + (n - r - a) as f64 * t_star, stop)
}

fn draw_binomial<R: Rng>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

/// Emulated effort-minimising N over a geometric grid in [n_lo, n_hi].
pub fn estimate_n_opt(
    pilot: &PilotSummary,
    n_lo: u64,
    n_hi: u64,
    rule: &PrecisionRule,
    gamma_main: f64,
    planner: &PlannerConfig,
    seed: u64,
) -> Result<NOptEstimate> {
    if pilot.survival_at_tmax == 0.0 || pilot.t_max < 3 {
        log::warn!("pilot leaves no unresolved streams at t_max; using N_Pilot = {n_lo}");
        return Ok(NOptEstimate {
            n: n_lo,
            grid: Vec::new(),
        });
    }
    let emu = Emulator::new(pilot, rule);
    let grid = geometric_grid(n_lo, n_hi.max(n_lo), planner.grid_points);
    let mut estimates = Vec::with_capacity(grid.len());
    for (j, &n) in grid.iter().enumerate() {
        let mut calc = UnionCalculator::new(n, gamma_main, pilot.epsilon)?;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for rep in 0..planner.replicates {
            let mut rng = stream_rng(
                seed,
                SeedDomain::Planner,
                (j * planner.replicates + rep) as u64,
            );
            let e = emu.replicate(n, &mut calc, &mut rng);
            sum += e;
            sum_sq += e * e;
        }
        let k = planner.replicates as f64;
        let mean = sum / k;
        let var = if k > 1.0 {
            ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
        } else {
            0.0
        };
        estimates.push(EffortEstimate {
            n,
            mean_effort: mean,
            std_error: (var / k).sqrt(),
        });
    }
    let best = estimates
        .iter()
        .min_by(|a, b| a.mean_effort.total_cmp(&b.mean_effort))
        .map_or(n_lo, |e| e.n);
    Ok(NOptEstimate {
        n: best,
        grid: estimates,
    })
}

/// Stream counts for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: Plan,
    /// N_Blind at the main-run level, used when no pilot informs N.
    pub n_blind_main: u64,
    pub n_opt: Option<NOptEstimate>,
}

/// Computes the counts the configured stream-count method needs.
pub fn plan(config: &RunConfig, pilot: Option<&PilotSummary>) -> Result<PlanOutcome> {
    use crate::engine::StreamCount;
    let eps = config.epsilon();
    let gamma_main = config.gamma_main();
    let n_blind_full = n_required(&config.rule, config.gamma, eps, Interval::FULL)?;
    let n_blind_main = if gamma_main == config.gamma {
        n_blind_full
    } else {
        n_required(&config.rule, gamma_main, eps, Interval::FULL)?
    };
    let needs_pilot_n = matches!(config.streams, StreamCount::Pilot | StreamCount::Optimal);
    let n_pilot_v = match (pilot, needs_pilot_n) {
        (Some(p), true) => Some(n_pilot(p, &config.rule, gamma_main, eps)?),
        _ => None,
    };
    let n_opt = match (pilot, n_pilot_v, config.streams) {
        (Some(p), Some(lo), StreamCount::Optimal) => {
            let hi = (config.planner.n_hi_factor * n_blind_main as f64).ceil() as u64;
            Some(estimate_n_opt(
                p,
                lo,
                hi,
                &config.rule,
                gamma_main,
                &config.planner,
                config.seed,
            )?)
        }
        _ => None,
    };
    Ok(PlanOutcome {
        plan: Plan {
            n_blind: n_blind_full,
            n_pilot: n_pilot_v,
            n_opt: n_opt.as_ref().map(|e| e.n),
        },
        n_blind_main,
        n_opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_blind_trivial() {
        assert_eq!(n_blind(1.0, 0.05, 1e-4).unwrap(), 1);
    }

    #[test]
    fn n_blind_paper_value() {
        assert_eq!(n_blind(0.01, 0.01, 1e-4).unwrap(), 68311);
        let v = n_blind(0.02, 0.01, 1e-4).unwrap();
        assert!(balanced_length(v, 0.01, 1e-4).unwrap() <= 0.02);
        assert!(balanced_length(v - 1, 0.01, 1e-4).unwrap() > 0.02);
    }

    #[test]
    fn n_blind_certificate() {
        let v = n_blind(0.05, 0.1, 2.5e-4).unwrap();
        assert!(balanced_length(v, 0.1, 2.5e-4).unwrap() <= 0.05);
        assert!(balanced_length(v - 1, 0.1, 2.5e-4).unwrap() > 0.05);
    }

    #[test]
    fn tail_fit_is_continuous_and_inverts() {
        assert_eq!(tail_survival(1000.0, 1000.0), 1.0);
        for v in [0.999, 0.9, 0.5, 0.1, 1e-3, 1e-6] {
            let t = tail_quantile(v, 1000.0);
            assert!(t >= 1000.0);
            assert!(
                (tail_survival(t, 1000.0) - v).abs() < 1e-9 * v.max(1e-3),
                "v={v} t={t}"
            );
        }
    }

    #[test]
    fn tail_table_matches_solver() {
        let table = TailTable::new(1000.0);
        for i in 0..2000 {
            let ln_v = -(i as f64) * 0.0237;
            let exact = tail_quantile_ln(ln_v, table.k);
            assert!((table.quantile(ln_v) / exact - 1.0).abs() < 1e-9, "{ln_v}");
        }
    }

    #[test]
    fn grid_is_geometric() {
        let g = geometric_grid(100, 400, 3);
        assert_eq!(g, vec![100, 200, 400]);
        assert_eq!(geometric_grid(7, 7, 25), vec![7]);
    }

    fn summary(positives: u64, negatives: u64, unresolved: u64) -> PilotSummary {
        let mut streams = Vec::new();
        for i in 0..positives + negatives + unresolved {
            let mut s = StreamState::new(i);
            if i < positives {
                s.status = Status::Positive;
                s.steps = 10 + i % 50;
            } else if i < positives + negatives {
                s.status = Status::Negative;
                s.steps = 5 + i % 20;
            } else {
                s.steps = 1000;
            }
            streams.push(s);
        }
        PilotSummary::from_streams(&streams, 1000, 0.001, 5e-5).unwrap()
    }

    #[test]
    fn n_pilot_full_interval_matches_blind() {
        let rule = PrecisionRule::fixed(0.05);
        let blind = n_blind(0.05, 0.009, 2.5e-4).unwrap();
        let scanned =
            smallest(|n| all_outcomes_admissible(n, &rule, 0.009, 2.5e-4, Interval::FULL)).unwrap();
        assert_eq!(blind, scanned);
    }

    #[test]
    fn n_pilot_shrinks_with_pilot() {
        let rule = PrecisionRule::fixed(0.02);
        let p = summary(50, 940, 10);
        let blind = n_blind(0.02, 0.009, 1e-4).unwrap();
        let np = n_pilot(&p, &rule, 0.009, 1e-4).unwrap();
        assert!(np < blind / 2, "{np} vs {blind}");
        assert!(all_outcomes_admissible(np, &rule, 0.009, 1e-4, p.interval).unwrap());
        assert!(!all_outcomes_admissible(np - 1, &rule, 0.009, 1e-4, p.interval).unwrap());
        let narrower = Interval::new(p.interval.low + 0.005, p.interval.high - 0.005);
        let nn = n_required(&rule, 0.009, 1e-4, narrower).unwrap();
        assert!(nn <= np);
    }

    #[test]
    fn n_opt_without_tail_returns_lower_end() {
        let p = summary(100, 900, 0);
        let est = estimate_n_opt(
            &p,
            500,
            2000,
            &PrecisionRule::fixed(0.05),
            0.08,
            &PlannerConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(est.n, 500);
    }

    #[test]
    fn n_opt_is_on_grid() {
        let p = summary(300, 650, 50);
        let rule = PrecisionRule::fixed(0.05);
        let lo = n_pilot(&p, &rule, 0.08, 2.5e-4).unwrap();
        let planner = PlannerConfig {
            grid_points: 8,
            replicates: 20,
            n_hi_factor: 4.0,
        };
        let est = estimate_n_opt(&p, lo, 4 * lo, &rule, 0.08, &planner, 3).unwrap();
        assert!(est.grid.iter().any(|e| e.n == est.n));
        assert!(est.n >= lo && est.n <= 4 * lo);
    }
}
