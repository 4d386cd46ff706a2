//! Small numerical building blocks shared across modules.

use statrs::function::gamma::ln_gamma;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

const CF_MAX_ITER: usize = 100_000;

/// Regularized incomplete beta function I_x(a, b).
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        1.0 - beta_reg_cf(b, a, 1.0 - x)
    } else {
        beta_reg_cf(a, b, x)
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for I_x(a,b), accurate when x < (a+1)/(a+b+2).
fn beta_reg_cf(a: f64, b: f64, x: f64) -> f64 {
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b) - a.ln();
    let front = ln_front.exp();
    if front == 0.0 {
        return 0.0;
    }
    let tiny = 1e-300;
    let eps = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < eps {
            break;
        }
    }
    (front * h).min(1.0)
}

/// ln of the Beta(a,b) density at x.
fn ln_beta_pdf(a: f64, b: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Solves I_x(a,b) = target for x, with target in (0,1).
///
/// Safeguarded Newton iteration inside a shrinking bracket; the bracket is
/// narrowed to below `1e-13` or the Newton step falls under 1e-15·x.
pub fn beta_quantile(target: f64, a: f64, b: f64) -> f64 {
    debug_assert!(target > 0.0 && target < 1.0);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x = initial_guess(target, a, b);
    for _ in 0..200 {
        let fx = beta_reg(a, b, x) - target;
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-13 {
            break;
        }
        let dens = ln_beta_pdf(a, b, x).exp();
        let mut next = if dens.is_finite() && dens > 0.0 {
            x - fx / dens
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) {
            return next;
        }
        x = next;
    }
    0.5 * (lo + hi)
}

fn initial_guess(target: f64, a: f64, b: f64) -> f64 {
    let mean = a / (a + b);
    let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    let z = normal_quantile(target);
    let g = mean + z * sd;
    if g > 0.0 && g < 1.0 {
        g
    } else {
        mean
    }
}

/// Standard normal quantile (Acklam's rational approximation, |rel err| < 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// ln C(n, k).
pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_reg_known_values() {
        assert!((beta_reg(1.0, 1.0, 0.3) - 0.3).abs() < 1e-15);
        // I_x(1,b) = 1 − (1−x)^b
        let v = beta_reg(1.0, 10.0, 0.2);
        assert!((v - (1.0 - 0.8f64.powi(10))).abs() < 1e-14);
        // I_x(a,1) = x^a
        assert!(
            (beta_reg(7.0, 1.0, 0.9) - 0.9f64.powi(7)).abs() < 1e-13,
            "{}",
            beta_reg(7.0, 1.0, 0.9) - 0.9f64.powi(7)
        );
        // symmetry
        let x = beta_reg(3.5, 7.25, 0.4);
        let y = beta_reg(7.25, 3.5, 0.6);
        assert!((x + y - 1.0).abs() < 1e-14);
    }

    #[test]
    fn beta_reg_large_parameters_is_finite_and_monotone() {
        let a = 34_000.0;
        let b = 34_300.0;
        let mut prev = 0.0;
        for i in 0..=200 {
            let x = 0.48 + 0.04 * i as f64 / 200.0;
            let v = beta_reg(a, b, x);
            assert!(v.is_finite() && v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn quantile_inverts() {
        for &(a, b) in &[
            (1.0, 9.0),
            (5.0, 6.0),
            (0.5, 0.5),
            (120.0, 3.0),
            (34155.0, 34157.0),
        ] {
            for &p in &[0.005, 0.025, 0.5, 0.975] {
                let x = beta_quantile(p, a, b);
                assert!((beta_reg(a, b, x) - p).abs() < 1e-9, "a={a} b={b} p={p}");
            }
        }
    }

    #[test]
    fn normal_quantile_sanity() {
        assert!((normal_quantile(0.975) - 1.959_963_985).abs() < 1e-8);
        assert!(normal_quantile(0.5).abs() < 1e-12);
    }
}
