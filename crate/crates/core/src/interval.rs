//! Confidence intervals for the power.
//!
//! * [`clopper_pearson`]: exact equal-tailed binomial interval.
//! * [`interval_infty`]: the Clopper–Pearson interval mapped through
//!   β ↦ (β − ε)/(1 − ε) (low) and β ↦ β/(1 − ε) (high), which absorbs the
//!   per-stream misclassification probability ε.
//! * [`interval_union`]: the union over every way the `u` outstanding streams
//!   could still resolve. Endpoints of Clopper–Pearson are nondecreasing in r
//!   at fixed n, so the union is the hull of its two extreme members.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::beta_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub const FULL: Interval = Interval {
        low: 0.0,
        high: 1.0,
    };

    pub fn new(low: f64, high: f64) -> Self {
        debug_assert!(low <= high, "[{low}, {high}]");
        Self { low, high }
    }

    pub fn length(&self) -> f64 {
        self.high - self.low
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.low <= self.low && self.high <= other.high
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.low, self.high)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gamma must lie in (0,1), got {gamma}"
        )))
    }
}

/// Lower Clopper–Pearson endpoint: solves P[Bin(n, p) ≥ r] = γ/2.
fn cp_low(r: u64, n: u64, gamma: f64) -> f64 {
    if r == 0 {
        0.0
    } else if r == n {
        (gamma / 2.0).powf(1.0 / n as f64)
    } else {
        beta_quantile(gamma / 2.0, r as f64, (n - r + 1) as f64)
    }
}

/// Upper endpoint through the mirror identity high(r, n) = 1 − low(n − r, n).
fn cp_high(r: u64, n: u64, gamma: f64) -> f64 {
    if r == n {
        1.0
    } else {
        1.0 - cp_low(n - r, n, gamma)
    }
}

pub fn clopper_pearson(r: u64, n: u64, gamma: f64) -> Result<Interval> {
    check_gamma(gamma)?;
    if r > n {
        return Err(Error::Counts(format!("r={r} exceeds n={n}")));
    }
    if n == 0 {
        return Ok(Interval::FULL);
    }
    Ok(Interval::new(cp_low(r, n, gamma), cp_high(r, n, gamma)))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "epsilon must lie in [0,1), got {epsilon}"
        )))
    }
}

fn debias_low(low: f64, epsilon: f64) -> f64 {
    ((low - epsilon) / (1.0 - epsilon)).clamp(0.0, 1.0)
}

fn debias_high(high: f64, epsilon: f64) -> f64 {
    (high / (1.0 - epsilon)).clamp(0.0, 1.0)
}

/// Interval from fully resolved counts: r positives, a negatives.
pub fn interval_infty(r: u64, a: u64, gamma: f64, epsilon: f64) -> Result<Interval> {
    check_epsilon(epsilon)?;
    let cp = clopper_pearson(r, r + a, gamma)?;
    Ok(Interval::new(
        debias_low(cp.low, epsilon),
        debias_high(cp.high, epsilon),
    ))
}

/// ∪_{r∞ = r}^{r+u} I∞(r∞, r + a + u − r∞).
pub fn interval_union(r: u64, a: u64, u: u64, gamma: f64, epsilon: f64) -> Result<Interval> {
    let n = r + a + u;
    let left = interval_infty(r, n - r, gamma, epsilon)?;
    let right = interval_infty(r + u, n - r - u, gamma, epsilon)?;
    Ok(Interval::new(left.low, right.high))
}

/// Outcome of intersecting the main-run interval with the pilot interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub interval: Interval,
    /// The two intervals were disjoint.
    pub empty: bool,
}

/// Set intersection; disjoint inputs collapse to the endpoint of `main`
/// nearest to `pilot` and are flagged.
pub fn intersect_with_pilot(main: Interval, pilot: Interval) -> Intersection {
    let low = main.low.max(pilot.low);
    let high = main.high.min(pilot.high);
    if low <= high {
        return Intersection {
            interval: Interval::new(low, high),
            empty: false,
        };
    }
    let point = if main.high < pilot.low {
        main.high
    } else {
        main.low
    };
    log::warn!("main interval {main} and pilot interval {pilot} are disjoint");
    Intersection {
        interval: Interval::new(point, point),
        empty: true,
    }
}

/// Cached union intervals for a fixed total number of streams n.
///
/// All three counts of a run always sum to the same n, so the lower
/// Clopper–Pearson endpoints for r = 0..=n are memoised lazily.
#[derive(Debug, Clone)]
pub struct UnionCalculator {
    n: u64,
    gamma: f64,
    epsilon: f64,
    lows: Vec<f64>,
}

impl UnionCalculator {
    pub fn new(n: u64, gamma: f64, epsilon: f64) -> Result<Self> {
        check_gamma(gamma)?;
        check_epsilon(epsilon)?;
        Ok(Self {
            n,
            gamma,
            epsilon,
            lows: vec![f64::NAN; n as usize + 1],
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn low(&mut self, r: u64) -> f64 {
        let slot = &mut self.lows[r as usize];
        if slot.is_nan() {
            *slot = cp_low(r, self.n, self.gamma);
        }
        *slot
    }

    /// Clopper–Pearson interval for r successes out of n.
    pub fn clopper_pearson(&mut self, r: u64) -> Interval {
        if self.n == 0 {
            return Interval::FULL;
        }
        let low = self.low(r);
        let high = if r == self.n {
            1.0
        } else {
            1.0 - self.low(self.n - r)
        };
        Interval::new(low, high)
    }

    /// I(r, a, u) where r + a + u must equal n.
    pub fn union(&mut self, r: u64, a: u64, u: u64) -> Interval {
        debug_assert_eq!(r + a + u, self.n);
        if self.n == 0 {
            return Interval::FULL;
        }
        let _ = a;
        let low = debias_low(self.low(r), self.epsilon);
        let high_cp = if r + u == self.n {
            1.0
        } else {
            1.0 - self.low(self.n - r - u)
        };
        Interval::new(low, debias_high(high_cp, self.epsilon))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clopper_pearson_closed_forms() {
        let ci = clopper_pearson(0, 10, 0.05).unwrap();
        assert_eq!(ci.low, 0.0);
        assert!((ci.high - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-12);
        assert!((ci.high - 0.30850).abs() < 1e-5);
        let ci = clopper_pearson(10, 10, 0.05).unwrap();
        assert!((ci.low - 0.025f64.powf(0.1)).abs() < 1e-12);
        assert_eq!(ci.high, 1.0);
        assert_eq!(clopper_pearson(0, 0, 0.3).unwrap(), Interval::FULL);
        assert!(clopper_pearson(11, 10, 0.05).is_err());
    }

    #[test]
    fn infty_reduces_to_cp_at_zero_epsilon() {
        for r in 0..=12 {
            let a = 12 - r;
            let cp = clopper_pearson(r, 12, 0.05).unwrap();
            assert_eq!(interval_infty(r, a, 0.05, 0.0).unwrap(), cp);
        }
        let i = interval_infty(0, 10, 0.05, 0.01).unwrap();
        assert_eq!(i.low, 0.0);
    }

    #[test]
    fn union_examples() {
        assert_eq!(
            interval_union(4, 7, 0, 0.05, 1e-4).unwrap(),
            interval_infty(4, 7, 0.05, 1e-4).unwrap()
        );
        assert_eq!(interval_union(0, 0, 9, 0.05, 1e-4).unwrap(), Interval::FULL);
    }

    #[test]
    fn pilot_intersection() {
        let x = intersect_with_pilot(Interval::new(0.55, 0.75), Interval::new(0.60, 0.80));
        assert_eq!(x.interval, Interval::new(0.60, 0.75));
        assert!(!x.empty);
        let m = Interval::new(0.2, 0.4);
        assert_eq!(intersect_with_pilot(m, Interval::FULL).interval, m);
        let x = intersect_with_pilot(Interval::new(0.1, 0.2), Interval::new(0.3, 0.4));
        assert!(x.empty);
        assert_eq!(x.interval.length(), 0.0);
        assert_eq!(x.interval.low, 0.2);
    }

    #[test]
    fn calculator_matches_free_functions() {
        let mut calc = UnionCalculator::new(40, 0.01, 1e-4).unwrap();
        for r in 0..=40u64 {
            for u in 0..=(40 - r) {
                let a = 40 - r - u;
                let expect = interval_union(r, a, u, 0.01, 1e-4).unwrap();
                assert_eq!(calc.union(r, a, u), expect);
            }
        }
    }

    #[test]
    fn mid_sample_endpoints() {
        // 5 of 10 at 95%: [0.187086, 0.812914]
        let ci = clopper_pearson(5, 10, 0.05).unwrap();
        assert!((ci.low - 0.187_086_4).abs() < 1e-6);
        assert!((ci.high - 0.812_913_6).abs() < 1e-6);
    }
}
