//! Joint test on the unresolved streams.
//!
//! At checkpoint t the unresolved partial sums are compared with G_t^α, the
//! law of S_t under p = α given survival. If fewer than r streams had
//! p ≤ α, the count T⁺ of order statistics i ≥ r lying in the lower η-tail
//! is stochastically dominated by Bin(n − r + 1, η); T⁻ mirrors this for the
//! upper tail. Rejecting both nulls certifies r further positives and a
//! further negatives among the unresolved streams.

use serde::{Deserialize, Serialize};

use crate::boundary::ConditionalDist;
use crate::error::{Error, Result};
use crate::interval::{intersect_with_pilot, Interval, UnionCalculator};
use crate::numeric::beta_reg;
use crate::precision::PrecisionRule;
use crate::spending::{JointSpendingSchedule, DEFAULT_HORIZON_CONSTANT, DEFAULT_JOINT_STRIDE};

pub const DEFAULT_ETA: f64 = 0.05;

/// Which side receives the extra unit when an asymmetric (r, a) is tried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    /// The side the pilot interval points to: negatives if its midpoint is below 0.5.
    Pilot,
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub gamma_joint: f64,
    pub eta: f64,
    pub stride: u64,
    pub horizon_constant: u64,
    pub completion: Completion,
}

impl JointConfig {
    pub fn new(gamma_joint: f64) -> Self {
        Self {
            gamma_joint,
            eta: DEFAULT_ETA,
            stride: DEFAULT_JOINT_STRIDE,
            horizon_constant: DEFAULT_HORIZON_CONSTANT,
            completion: Completion::Pilot,
        }
    }

    pub fn schedule(&self) -> Result<JointSpendingSchedule> {
        JointSpendingSchedule::new(self.gamma_joint, self.stride, self.horizon_constant)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0,1), got {}",
                self.eta
            )));
        }
        self.schedule().map(|_| ())
    }
}

/// Counts and interval inputs at a checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct Counts {
    pub positives: u64,
    pub negatives: u64,
    pub unresolved: u64,
}

/// Interval reported if `r` more positives and `a` more negatives were known.
pub fn adjusted_interval(
    calc: &mut UnionCalculator,
    counts: Counts,
    r: u64,
    a: u64,
    pilot: Option<Interval>,
) -> Interval {
    let iv = calc.union(
        counts.positives + r,
        counts.negatives + a,
        counts.unresolved - r - a,
    );
    match pilot {
        Some(p) => intersect_with_pilot(iv, p).interval,
        None => iv,
    }
}

/// Smallest (r_t, a_t) whose adjusted interval is admissible; `None` when even
/// resolving every unresolved stream would not help.
pub fn choose_ra(
    calc: &mut UnionCalculator,
    counts: Counts,
    pilot: Option<Interval>,
    rule: &PrecisionRule,
    completion: Completion,
) -> Option<(u64, u64)> {
    let u = counts.unresolved;
    let mut ok = |r: u64, a: u64| rule.admits(&adjusted_interval(calc, counts, r, a, pilot));
    let negatives_first = match completion {
        Completion::Negative => true,
        Completion::Positive => false,
        Completion::Pilot => pilot.is_some_and(|p| p.midpoint() < 0.5),
    };
    let ordered = |k_big: u64, k_small: u64| {
        if negatives_first {
            [(k_small, k_big), (k_big, k_small)]
        } else {
            [(k_big, k_small), (k_small, k_big)]
        }
    };
    let half = u / 2;
    if ok(0, 0) {
        return Some((0, 0));
    }
    if !ok(half, half) {
        if u % 2 == 1 {
            return ordered(half + 1, half).into_iter().find(|&(r, a)| ok(r, a));
        }
        return None;
    }
    // admissibility is monotone in k because the adjusted intervals are nested
    let (mut lo, mut hi) = (0u64, half);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let k = hi;
    ordered(k, k - 1)
        .into_iter()
        .find(|&(r, a)| ok(r, a))
        .or(Some((k, k)))
}

/// (T⁺, T⁻) over ascending `sums`; a side is `None` when its null is vacuous.
///
/// T⁺ counts 1-based indices i ∈ [r, n] with G(S_(i)) ≤ η. T⁻ counts
/// i ∈ [1, n − a + 1] with P_α(S ≥ S_(i) | alive) ≤ η, the upper-tail
/// analogue of G that keeps P(statistic ≤ η) ≤ η for a discrete law.
pub fn test_statistics(
    sums: &[i64],
    dist: &ConditionalDist,
    r: u64,
    a: u64,
    eta: f64,
) -> (Option<u64>, Option<u64>) {
    debug_assert!(sums.windows(2).all(|w| w[0] <= w[1]));
    let n = sums.len() as u64;
    let plus = (r >= 1 && r <= n).then(|| {
        sums[(r - 1) as usize..]
            .iter()
            .filter(|&&s| dist.cdf(s) <= eta)
            .count() as u64
    });
    let minus = (a >= 1 && a <= n).then(|| {
        sums[..(n - a + 1) as usize]
            .iter()
            .filter(|&&s| dist.sf(s) <= eta)
            .count() as u64
    });
    (plus, minus)
}

/// P[Bin(n, p) ≥ k].
pub fn binomial_upper_tail(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        1.0
    } else if k > n || p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else {
        beta_reg(k as f64, (n - k + 1) as f64, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointDecision {
    BothReject,
    Fail,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Tail probability of T⁺ under its dominating binomial, 0 if vacuous.
    pub p_plus: f64,
    pub p_minus: f64,
    pub plus_rejected: bool,
    pub minus_rejected: bool,
}

impl Decision {
    pub fn both_reject(&self) -> bool {
        self.plus_rejected && self.minus_rejected
    }
}

/// Tests both nulls at level ξ/2 each.
pub fn decide(
    t_plus: Option<u64>,
    t_minus: Option<u64>,
    n: u64,
    r: u64,
    a: u64,
    eta: f64,
    xi: f64,
) -> Decision {
    let p_plus = t_plus.map_or(0.0, |tp| binomial_upper_tail(n - r + 1, eta, tp));
    let p_minus = t_minus.map_or(0.0, |tm| binomial_upper_tail(n - a + 1, eta, tm));
    Decision {
        p_plus,
        p_minus,
        plus_rejected: t_plus.is_none() || p_plus <= xi / 2.0,
        minus_rejected: t_minus.is_none() || p_minus <= xi / 2.0,
    }
}

/// One checkpoint of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTestRecord {
    pub t: u64,
    pub checkpoint: u64,
    pub unresolved: u64,
    pub r: u64,
    pub a: u64,
    pub t_plus: Option<u64>,
    pub t_minus: Option<u64>,
    pub p_plus: f64,
    pub p_minus: f64,
    pub xi: f64,
    pub decision: JointDecision,
}

/// Test schedule and history of one run.
#[derive(Debug, Clone)]
pub struct JointTestState {
    pub config: JointConfig,
    pub schedule: JointSpendingSchedule,
    pub history: Vec<JointTestRecord>,
}

impl JointTestState {
    pub fn new(config: JointConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: config.schedule()?,
            config,
            history: Vec::new(),
        })
    }

    pub fn next_checkpoint_after(&self, t: u64) -> u64 {
        self.schedule.next_checkpoint_after(t)
    }

    pub fn is_checkpoint(&self, t: u64) -> bool {
        t > 0 && t.is_multiple_of(self.config.stride)
    }

    /// Level spent by the tests performed so far.
    pub fn spent(&self) -> f64 {
        self.history
            .iter()
            .filter(|h| h.decision != JointDecision::Infeasible)
            .map(|h| h.xi)
            .sum()
    }

    /// Runs the test at checkpoint `t`; returns the certified (r, a) on success.
    #[allow(clippy::too_many_arguments)]
    pub fn run_checkpoint(
        &mut self,
        t: u64,
        sums: &[i64],
        dist: &ConditionalDist,
        calc: &mut UnionCalculator,
        counts: Counts,
        pilot: Option<Interval>,
        rule: &PrecisionRule,
    ) -> Option<(u64, u64)> {
        let i = t / self.config.stride;
        let xi = self.schedule.xi_at_checkpoint(i);
        let n = sums.len() as u64;
        let mut record = JointTestRecord {
            t,
            checkpoint: i,
            unresolved: n,
            r: 0,
            a: 0,
            t_plus: None,
            t_minus: None,
            p_plus: 1.0,
            p_minus: 1.0,
            xi,
            decision: JointDecision::Infeasible,
        };
        let Some((r, a)) = choose_ra(calc, counts, pilot, rule, self.config.completion) else {
            self.history.push(record);
            return None;
        };
        let (tp, tm) = test_statistics(sums, dist, r, a, self.config.eta);
        let d = decide(tp, tm, n, r, a, self.config.eta, xi);
        record.r = r;
        record.a = a;
        record.t_plus = tp;
        record.t_minus = tm;
        record.p_plus = d.p_plus;
        record.p_minus = d.p_minus;
        record.decision = if d.both_reject() {
            JointDecision::BothReject
        } else {
            JointDecision::Fail
        };
        self.history.push(record);
        d.both_reject().then_some((r, a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_dist(lo: i64, hi: i64) -> ConditionalDist {
        let masses = vec![1.0; (hi - lo + 1) as usize];
        ConditionalDist::from_masses(10, lo, &masses).unwrap()
    }

    #[test]
    fn median_sums_give_zero() {
        let d = flat_dist(0, 20);
        let sums = vec![10; 30];
        assert_eq!(test_statistics(&sums, &d, 1, 1, 0.05), (Some(0), Some(0)));
        assert_eq!(test_statistics(&sums, &d, 0, 0, 0.05), (None, None));
    }

    #[test]
    fn lower_tail_count() {
        // levels 0..=99 uniform: G(x) = (x+1)/100 ≤ 0.05 iff x ≤ 4
        let d = flat_dist(0, 99);
        let mut sums: Vec<i64> = vec![0; 20];
        sums.extend(vec![50; 80]);
        assert_eq!(test_statistics(&sums, &d, 1, 1, 0.05).0, Some(20));
    }

    #[test]
    fn overlap_identity_at_half() {
        let d = flat_dist(0, 9);
        for n in 1..8usize {
            for mask in 0..(1u32 << n) {
                let mut sums: Vec<i64> = (0..n)
                    .map(|i| if mask >> i & 1 == 1 { 0 } else { 9 })
                    .collect();
                sums.sort();
                for r in 1..=n as u64 {
                    for a in 1..=n as u64 {
                        if r + a > n as u64 + 1 {
                            continue;
                        }
                        let need = (n as u64 + 2).saturating_sub(r + a);
                        // with only extreme levels, every index is in one of the tails
                        let (tp, tm) = test_statistics(&sums, &d, r, a, 0.5);
                        assert!(tp.unwrap() + tm.unwrap() >= need);
                    }
                }
            }
        }
    }

    #[test]
    fn decision_examples() {
        let d = decide(Some(0), Some(50), 100, 1, 1, 0.05, 1e-3);
        assert!(!d.plus_rejected && d.p_plus == 1.0);
        let d = decide(Some(20), None, 100, 1, 0, 0.05, 1e-3);
        assert!(d.plus_rejected && d.minus_rejected);
        // P[Bin(100, 0.05) ≥ 20] = 1.0523e-7
        assert!(
            (d.p_plus / 1.052_295_342e-7 - 1.0).abs() < 1e-8,
            "{}",
            d.p_plus
        );
        let d = decide(None, None, 5, 0, 0, 0.05, 1e-9);
        assert!(d.both_reject());
    }

    #[test]
    fn choose_ra_cases() {
        let rule = PrecisionRule::fixed(0.5);
        let mut calc = UnionCalculator::new(100, 0.05, 1e-4).unwrap();
        let counts = Counts {
            positives: 50,
            negatives: 48,
            unresolved: 2,
        };
        assert_eq!(
            choose_ra(&mut calc, counts, None, &rule, Completion::Pilot),
            Some((0, 0))
        );

        let tight = PrecisionRule::fixed(1e-3);
        let mut calc = UnionCalculator::new(10, 0.05, 1e-4).unwrap();
        let counts = Counts {
            positives: 4,
            negatives: 4,
            unresolved: 2,
        };
        assert_eq!(
            choose_ra(&mut calc, counts, None, &tight, Completion::Pilot),
            None
        );

        let rule = PrecisionRule::fixed(0.1);
        let n = 2000;
        let mut calc = UnionCalculator::new(n, 0.05, 1e-4).unwrap();
        let counts = Counts {
            positives: 900,
            negatives: 900,
            unresolved: 200,
        };
        let (r, a) = choose_ra(&mut calc, counts, None, &rule, Completion::Positive).unwrap();
        assert!(r >= a && r - a <= 1);
        assert!(rule.admits(&adjusted_interval(&mut calc, counts, r, a, None)));
        if a > 0 {
            assert!(!rule.admits(&adjusted_interval(&mut calc, counts, a - 1, a - 1, None)));
        }
    }
}
