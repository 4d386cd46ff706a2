use mcpower::interval::{clopper_pearson, interval_infty, interval_union, Interval};
use mcpower::precision::PrecisionRule;
use mcpower::spending::SpendingSchedule;
use proptest::prelude::*;

proptest! {
    #[test]
    fn clopper_pearson_is_ordered_and_contains_mle(n in 1u64..400, frac in 0.0f64..=1.0, gamma in 0.001f64..0.5) {
        let r = (frac * n as f64).round() as u64;
        let iv = clopper_pearson(r, n, gamma).unwrap();
        let mle = r as f64 / n as f64;
        prop_assert!(0.0 <= iv.low && iv.low <= mle && mle <= iv.high && iv.high <= 1.0);
    }

    #[test]
    fn union_contains_every_completion(r in 0u64..40, a in 0u64..40, u in 0u64..20, gamma in 0.005f64..0.2, eps in 0.0f64..1e-3) {
        prop_assume!(r + a + u > 0);
        let hull = interval_union(r, a, u, gamma, eps).unwrap();
        for k in 0..=u {
            let iv = interval_infty(r + k, a + u - k, gamma, eps).unwrap();
            prop_assert!(iv.is_subset_of(&hull), "{iv} not in {hull}");
        }
    }

    #[test]
    fn resolving_a_stream_nests_the_union(r in 0u64..40, a in 0u64..40, u in 1u64..20, gamma in 0.005f64..0.2, positive in any::<bool>()) {
        let before = interval_union(r, a, u, gamma, 1e-4).unwrap();
        let after = if positive {
            interval_union(r + 1, a, u - 1, gamma, 1e-4).unwrap()
        } else {
            interval_union(r, a + 1, u - 1, gamma, 1e-4).unwrap()
        };
        prop_assert!(after.is_subset_of(&before));
    }

    #[test]
    fn spending_is_nondecreasing_and_bounded(eps in 1e-6f64..0.5, h in 1u64..5000, t in 0u64..1_000_000) {
        let s = SpendingSchedule::ratio(eps, h).unwrap();
        let (a, b) = (s.epsilon_at(t), s.epsilon_at(t + 1));
        prop_assert!(0.0 <= a && a <= b && b < eps);
        prop_assert!((b - a - s.increment_at(t + 1)).abs() <= 1e-15);
    }

    #[test]
    fn rules_admit_every_shorter_interval_with_the_same_midpoint(m in 0.05f64..0.95, shrink in 0.0f64..1.0) {
        let rules = [
            PrecisionRule::fixed(0.04),
            PrecisionRule::sqrt_profile(0.04),
            PrecisionRule::band(0.1, 0.04),
            PrecisionRule::left_tail(0.04),
        ];
        for rule in rules {
            let half = 0.02 * shrink;
            let iv = Interval::new(m - half, m + half);
            prop_assert!(rule.admits(&iv), "{rule:?} rejects {iv}");
        }
    }
}
