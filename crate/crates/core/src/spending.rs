//! Error-spending sequences.
//!
//! `SpendingSchedule` controls how quickly the per-stream error budget ε is
//! released over time (ε_t ↗ ε). `JointSpendingSchedule` distributes the
//! budget of the joint test over its checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default half-life `h` of the ratio spending sequence.
pub const DEFAULT_HALF_LIFE: u64 = 1000;

/// Default distance between joint-test checkpoints.
pub const DEFAULT_JOINT_STRIDE: u64 = 200_000;

/// Default horizon constant of the joint-test budget.
pub const DEFAULT_HORIZON_CONSTANT: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpendingKind {
    /// ε_t = ε·t/(h+t)
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpendingSchedule {
    pub epsilon_total: f64,
    pub half_life: u64,
    pub kind: SpendingKind,
}

/// Constants (λ, q, T) with ε_t − ε_{t−1} ≥ λ·t^{−q} for every t ≥ T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncrementBound {
    pub lambda: f64,
    pub q: f64,
    pub from_step: u64,
}

impl SpendingSchedule {
    pub fn ratio(epsilon_total: f64, half_life: u64) -> Result<Self> {
        if !(epsilon_total > 0.0 && epsilon_total < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0,1), got {epsilon_total}"
            )));
        }
        if half_life == 0 {
            return Err(Error::Config("spending half-life must be positive".into()));
        }
        Ok(Self {
            epsilon_total,
            half_life,
            kind: SpendingKind::Ratio,
        })
    }

    pub fn epsilon_at(&self, t: u64) -> f64 {
        match self.kind {
            SpendingKind::Ratio => {
                let t = t as f64;
                self.epsilon_total * t / (self.half_life as f64 + t)
            }
        }
    }

    /// ε_t − ε_{t−1}, computed without cancellation.
    pub fn increment_at(&self, t: u64) -> f64 {
        if t == 0 {
            return 0.0;
        }
        match self.kind {
            SpendingKind::Ratio => {
                let h = self.half_life as f64;
                let t = t as f64;
                self.epsilon_total * h / ((h + t) * (h + t - 1.0))
            }
        }
    }

    /// Increment lower bound with exponent q = 2, valid from `from_step` on.
    ///
    /// For the ratio form t²·(ε_t − ε_{t−1}) = ε·h·t²/((h+t)(h+t−1)) is
    /// increasing in t, so its value at `from_step` is the largest valid λ.
    pub fn increment_bound(&self, from_step: u64) -> IncrementBound {
        let from_step = from_step.max(1);
        let t = from_step as f64;
        IncrementBound {
            lambda: self.increment_at(from_step) * t * t,
            q: 2.0,
            from_step,
        }
    }
}

/// Budget ξ of the joint test, positive only at checkpoints t_i = i·stride.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpendingSchedule {
    pub gamma_joint: f64,
    pub checkpoint_stride: u64,
    pub horizon_constant: u64,
}

impl JointSpendingSchedule {
    pub fn new(gamma_joint: f64, checkpoint_stride: u64, horizon_constant: u64) -> Result<Self> {
        if !(gamma_joint > 0.0 && gamma_joint < 1.0) {
            return Err(Error::Config(format!(
                "gamma-joint must lie in (0,1), got {gamma_joint}"
            )));
        }
        if checkpoint_stride == 0 || horizon_constant == 0 {
            return Err(Error::Config(
                "joint stride and horizon constant must be positive".into(),
            ));
        }
        Ok(Self {
            gamma_joint,
            checkpoint_stride,
            horizon_constant,
        })
    }

    /// Cumulative budget Σ_{t ≤ t_i} ξ_t = γ_J·i/(c+i).
    pub fn xi_cumulative_at_checkpoint(&self, i: u64) -> f64 {
        let i = i as f64;
        self.gamma_joint * i / (self.horizon_constant as f64 + i)
    }

    /// ξ_{t_i}, the level available at checkpoint i (1-based).
    pub fn xi_at_checkpoint(&self, i: u64) -> f64 {
        if i == 0 {
            return 0.0;
        }
        // γ_J·c/((c+i)(c+i−1)), the first difference in closed form
        let c = self.horizon_constant as f64;
        let i = i as f64;
        self.gamma_joint * c / ((c + i) * (c + i - 1.0))
    }

    /// ξ_t for an arbitrary step.
    pub fn xi_at(&self, t: u64) -> f64 {
        if t == 0 || !t.is_multiple_of(self.checkpoint_stride) {
            0.0
        } else {
            self.xi_at_checkpoint(t / self.checkpoint_stride)
        }
    }

    pub fn checkpoint_time(&self, i: u64) -> u64 {
        i * self.checkpoint_stride
    }

    /// First checkpoint strictly after `t`.
    pub fn next_checkpoint_after(&self, t: u64) -> u64 {
        (t / self.checkpoint_stride + 1) * self.checkpoint_stride
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> SpendingSchedule {
        SpendingSchedule::ratio(1e-4, 1000).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        let s = sched();
        assert_eq!(s.epsilon_at(0), 0.0);
        assert!((s.epsilon_at(1000) - 5e-5).abs() < 1e-18);
        let far = s.epsilon_at(u64::MAX / 2);
        assert!((far - 1e-4).abs() < 1e-15);
        assert!(s.epsilon_at(1_000_000_000) < 1e-4);
    }

    #[test]
    fn monotone_on_grid() {
        let s = sched();
        let mut prev = 0.0;
        for t in 1..=1_000_000u64 {
            let e = s.epsilon_at(t);
            assert!(e >= prev, "t={t}");
            prev = e;
        }
        let j = JointSpendingSchedule::new(0.001, 200_000, 20).unwrap();
        let mut prev = 0.0;
        for i in 1..=10_000 {
            let c = j.xi_cumulative_at_checkpoint(i);
            assert!(c >= prev && c <= 0.001);
            prev = c;
        }
    }

    #[test]
    fn increment_matches_difference() {
        let s = sched();
        for t in [1u64, 2, 10, 999, 1000, 54321] {
            let diff = s.epsilon_at(t) - s.epsilon_at(t - 1);
            assert!(
                (diff - s.increment_at(t)).abs() <= 1e-19 + 1e-9 * diff,
                "t={t}"
            );
        }
    }

    #[test]
    fn reported_increment_bound_holds() {
        for eps in [1e-4, 0.01, 0.25] {
            let s = SpendingSchedule::ratio(eps, 1000).unwrap();
            for from in [1u64, 1000] {
                let b = s.increment_bound(from);
                for t in from..=1_000_000 {
                    let lhs = s.increment_at(t);
                    let rhs = b.lambda * (t as f64).powf(-b.q);
                    assert!(lhs >= rhs * (1.0 - 1e-12), "eps={eps} t={t}");
                }
            }
        }
    }

    #[test]
    fn xi_examples() {
        let j = JointSpendingSchedule::new(0.001, 200_000, 20).unwrap();
        assert!((j.xi_cumulative_at_checkpoint(1) - 0.001 / 21.0).abs() < 1e-18);
        assert!((j.xi_cumulative_at_checkpoint(20) - 5e-4).abs() < 1e-18);
        assert!((j.xi_cumulative_at_checkpoint(u64::MAX / 4) - 0.001).abs() < 1e-15);
        let total: f64 = (1..=100_000).map(|i| j.xi_at_checkpoint(i)).sum();
        assert!(total <= 0.001);
        assert_eq!(j.xi_at(199_999), 0.0);
        assert!(
            (j.xi_at(400_000)
                - (j.xi_cumulative_at_checkpoint(2) - j.xi_cumulative_at_checkpoint(1)))
            .abs()
                < 1e-18
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SpendingSchedule::ratio(0.0, 1000).is_err());
        assert!(SpendingSchedule::ratio(1.0, 1000).is_err());
        assert!(SpendingSchedule::ratio(0.1, 0).is_err());
        assert!(JointSpendingSchedule::new(0.0, 10, 20).is_err());
    }
}
