//! Admissible confidence intervals.
//!
//! A rule is a set A of intervals at which the algorithm may stop. Every
//! built-in rule is closed under taking subintervals and admits all
//! zero-length intervals, so membership is equivalently described by the
//! largest admissible length as a function of the midpoint, see
//! [`PrecisionRule::delta_at`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::Interval;

/// Reference point of the square-root profile: Δ1(0.05) = 0.02.
pub const SQRT_REFERENCE_MIDPOINT: f64 = 0.05;

const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrecisionRule {
    /// length ≤ delta
    Fixed { delta: f64 },
    /// length ≤ delta_ref·√(M(1−M))/√(M_ref(1−M_ref))
    SqrtProfile { delta_ref: f64, midpoint_ref: f64 },
    /// length ≤ inner, or (length ≤ outer and low > left_cut and high < right_cut)
    Band {
        outer: f64,
        inner: f64,
        left_cut: f64,
        right_cut: f64,
    },
    /// low > cut, or length ≤ delta
    LeftTail { delta: f64, cut: f64 },
    /// length ≤ Δ(M), Δ piecewise linear through the given knots
    Custom { knots: Vec<(f64, f64)> },
}

/// Supremum of admissible lengths at one midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxLength {
    pub value: f64,
    /// Whether an interval of exactly `value` is itself admitted.
    pub attained: bool,
}

impl MaxLength {
    fn closed(value: f64) -> Self {
        Self {
            value,
            attained: true,
        }
    }

    /// Whether a length is admitted; lengths within 1e-12 of the supremum
    /// count as ties and follow `attained`.
    pub fn allows(&self, length: f64) -> bool {
        if (length - self.value).abs() <= TIE_TOLERANCE {
            self.attained
        } else {
            length < self.value
        }
    }
}

impl PrecisionRule {
    pub fn fixed(delta: f64) -> Self {
        PrecisionRule::Fixed { delta }
    }

    /// Δ1: 0.02 at M = 0.05, scaled by the binomial standard deviation.
    pub fn sqrt_profile(delta_ref: f64) -> Self {
        PrecisionRule::SqrtProfile {
            delta_ref,
            midpoint_ref: SQRT_REFERENCE_MIDPOINT,
        }
    }

    /// Δ2 with the given lengths and the cuts 0.05 / 0.95.
    pub fn band(outer: f64, inner: f64) -> Self {
        PrecisionRule::Band {
            outer,
            inner,
            left_cut: 0.05,
            right_cut: 0.95,
        }
    }

    /// Δ3 with cut 0.05.
    pub fn left_tail(delta: f64) -> Self {
        PrecisionRule::LeftTail { delta, cut: 0.05 }
    }

    pub fn custom(mut knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config("custom rule needs at least two knots".into()));
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(m, d) in &knots {
            if !(0.0..=1.0).contains(&m) || !(d >= 0.0) {
                return Err(Error::Config(format!(
                    "custom rule knot ({m}, {d}) outside [0,1] x [0,inf)"
                )));
            }
        }
        if knots[0].0 > 0.0 || knots[knots.len() - 1].0 < 1.0 {
            return Err(Error::Config("custom rule knots must span [0,1]".into()));
        }
        let rule = PrecisionRule::Custom { knots };
        if !rule.shrink_monotone_on_grid(101) {
            log::warn!(
                "custom precision rule is not closed under subintervals on a 101-point grid"
            );
        }
        Ok(rule)
    }

    /// Reads a two-column (midpoint, max length) table; `#` starts a comment.
    pub fn custom_from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut knots = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: bad number {s:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            };
            if cols.len() != 2 {
                return Err(Error::Config(format!(
                    "{}:{}: expected two columns",
                    path.display(),
                    lineno + 1
                )));
            }
            knots.push((parse(cols[0])?, parse(cols[1])?));
        }
        Self::custom(knots)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            PrecisionRule::Fixed { delta } => *delta > 0.0,
            PrecisionRule::SqrtProfile {
                delta_ref,
                midpoint_ref,
            } => *delta_ref > 0.0 && *midpoint_ref > 0.0 && *midpoint_ref < 1.0,
            PrecisionRule::Band {
                outer,
                inner,
                left_cut,
                right_cut,
            } => *inner > 0.0 && outer >= inner && left_cut < right_cut,
            PrecisionRule::LeftTail { delta, .. } => *delta > 0.0,
            PrecisionRule::Custom { knots } => knots.len() >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid precision rule {self}")))
        }
    }

    /// The length that must be met where the rule is strictest; used to
    /// derive the default per-stream error ε = Δ/200.
    pub fn reference_delta(&self) -> f64 {
        match self {
            PrecisionRule::Fixed { delta } => *delta,
            PrecisionRule::SqrtProfile { delta_ref, .. } => *delta_ref,
            PrecisionRule::Band { inner, .. } => *inner,
            PrecisionRule::LeftTail { delta, .. } => *delta,
            PrecisionRule::Custom { knots } => knots
                .iter()
                .map(|k| k.1)
                .filter(|d| *d > 0.0)
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn admits(&self, iv: &Interval) -> bool {
        let len = iv.length();
        let fits = |limit: f64| len <= limit + TIE_TOLERANCE;
        match self {
            PrecisionRule::Fixed { delta } => fits(*delta),
            PrecisionRule::SqrtProfile { .. } | PrecisionRule::Custom { .. } => {
                fits(self.delta_at(iv.midpoint()).value)
            }
            PrecisionRule::Band {
                outer,
                inner,
                left_cut,
                right_cut,
            } => fits(*inner) || (fits(*outer) && iv.low > *left_cut && iv.high < *right_cut),
            PrecisionRule::LeftTail { delta, cut } => iv.low > *cut || fits(*delta),
        }
    }

    /// sup{length of admitted intervals with midpoint m}.
    pub fn delta_at(&self, m: f64) -> MaxLength {
        match self {
            PrecisionRule::Fixed { delta } => MaxLength::closed(*delta),
            PrecisionRule::SqrtProfile {
                delta_ref,
                midpoint_ref,
            } => {
                let v = (m * (1.0 - m)).max(0.0).sqrt();
                let r = (midpoint_ref * (1.0 - midpoint_ref)).sqrt();
                MaxLength::closed(delta_ref * v / r)
            }
            PrecisionRule::Band {
                outer,
                inner,
                left_cut,
                right_cut,
            } => {
                // wide branch: strict cut conditions, so only approached
                let by_cuts = (2.0 * (m - left_cut)).min(2.0 * (right_cut - m));
                let wide = if *outer < by_cuts {
                    MaxLength::closed(*outer)
                } else {
                    MaxLength {
                        value: by_cuts,
                        attained: false,
                    }
                };
                if wide.value > *inner {
                    wide
                } else {
                    MaxLength::closed(*inner)
                }
            }
            PrecisionRule::LeftTail { delta, cut } => {
                // intervals in [0,1] with midpoint m are at most 2·min(m, 1−m) long
                let cap = 2.0 * m.min(1.0 - m);
                let by_cut = 2.0 * (m - cut);
                let wide = if cap < by_cut {
                    MaxLength::closed(cap)
                } else {
                    MaxLength {
                        value: by_cut,
                        attained: false,
                    }
                };
                if wide.value > *delta {
                    wide
                } else {
                    MaxLength::closed(*delta)
                }
            }
            PrecisionRule::Custom { knots } => MaxLength::closed(interpolate(knots, m)),
        }
    }

    fn shrink_monotone_on_grid(&self, points: usize) -> bool {
        let g = |i: usize| i as f64 / (points - 1) as f64;
        for i in 0..points {
            for j in i..points {
                let outer = Interval::new(g(i), g(j));
                if !self.admits(&outer) {
                    continue;
                }
                for k in i..=j {
                    for l in k..=j {
                        if !self.admits(&Interval::new(g(k), g(l))) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

fn interpolate(knots: &[(f64, f64)], m: f64) -> f64 {
    let i = knots.partition_point(|k| k.0 <= m);
    if i == 0 {
        return knots[0].1;
    }
    if i == knots.len() {
        return knots[knots.len() - 1].1;
    }
    let (x0, y0) = knots[i - 1];
    let (x1, y1) = knots[i];
    if x1 == x0 {
        return y1;
    }
    y0 + (y1 - y0) * (m - x0) / (x1 - x0)
}

impl fmt::Display for PrecisionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecisionRule::Fixed { delta } => write!(f, "fixed:{delta}"),
            PrecisionRule::SqrtProfile {
                delta_ref,
                midpoint_ref,
            } => {
                write!(f, "sqrt:{delta_ref},{midpoint_ref}")
            }
            PrecisionRule::Band {
                outer,
                inner,
                left_cut,
                right_cut,
            } => write!(f, "band:{outer},{inner},{left_cut},{right_cut}"),
            PrecisionRule::LeftTail { delta, cut } => write!(f, "lefttail:{delta},{cut}"),
            PrecisionRule::Custom { knots } => write!(f, "custom({} knots)", knots.len()),
        }
    }
}

impl FromStr for PrecisionRule {
    type Err = Error;

    /// `fixed:0.02 | sqrt[:Δref[,Mref]] | band:outer,inner,left,right |
    /// lefttail:Δ,cut | custom:<path>`
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let nums = || -> Result<Vec<f64>> {
            rest.split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad number {p:?} in rule {s:?}")))
                })
                .collect()
        };
        let rule = match kind.trim() {
            "fixed" => match nums()?.as_slice() {
                [d] => PrecisionRule::fixed(*d),
                _ => return Err(Error::Config(format!("expected fixed:<delta>, got {s:?}"))),
            },
            "sqrt" => match nums()?.as_slice() {
                [] => PrecisionRule::sqrt_profile(0.02),
                [d] => PrecisionRule::sqrt_profile(*d),
                [d, m] => PrecisionRule::SqrtProfile {
                    delta_ref: *d,
                    midpoint_ref: *m,
                },
                _ => {
                    return Err(Error::Config(format!(
                        "expected sqrt[:<delta>[,<midpoint>]], got {s:?}"
                    )))
                }
            },
            "band" => match nums()?.as_slice() {
                [o, i, l, r] => PrecisionRule::Band {
                    outer: *o,
                    inner: *i,
                    left_cut: *l,
                    right_cut: *r,
                },
                _ => {
                    return Err(Error::Config(format!(
                        "expected band:outer,inner,left,right, got {s:?}"
                    )))
                }
            },
            "lefttail" => match nums()?.as_slice() {
                [d, c] => PrecisionRule::LeftTail { delta: *d, cut: *c },
                [d] => PrecisionRule::left_tail(*d),
                _ => {
                    return Err(Error::Config(format!(
                        "expected lefttail:<delta>,<cut>, got {s:?}"
                    )))
                }
            },
            "custom" => PrecisionRule::custom_from_file(Path::new(rest.trim()))?,
            other => return Err(Error::Config(format!("unknown rule kind {other:?}"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centred(m: f64, len: f64) -> Interval {
        Interval::new(m - len / 2.0, m + len / 2.0)
    }

    #[test]
    fn sqrt_rule_examples() {
        let r = PrecisionRule::sqrt_profile(0.02);
        assert!((r.delta_at(0.05).value - 0.02).abs() < 1e-15);
        assert!(r.admits(&Interval::new(0.04, 0.06)));
        // Δ1(0.5) = 0.01/√0.0475 = 0.0458831…
        assert!((r.delta_at(0.5).value - 0.045_883_1).abs() < 1e-7);
        assert!(r.admits(&centred(0.5, 0.0458)));
        assert!(!r.admits(&centred(0.5, 0.0459)));
        assert!(!r.admits(&centred(0.5, 0.046)));
        assert_eq!(r.delta_at(0.0).value, 0.0);
        assert_eq!(r.delta_at(1.0).value, 0.0);
    }

    #[test]
    fn fixed_and_band_examples() {
        assert_eq!(PrecisionRule::fixed(0.02).delta_at(0.3).value, 0.02);
        let band = PrecisionRule::band(0.1, 0.02);
        assert!((band.delta_at(0.5).value - 0.1).abs() < 1e-15);
        assert!(band.admits(&centred(0.5, 0.1)));
        assert!(!band.admits(&Interval::new(0.04, 0.1)));
        assert!(band.admits(&Interval::new(0.04, 0.06)));
    }

    #[test]
    fn left_tail_examples() {
        let r = PrecisionRule::left_tail(0.02);
        assert!(r.admits(&Interval::new(0.06, 0.9)));
        assert!(!r.admits(&Interval::new(0.05, 0.9)));
        assert!(r.admits(&Interval::new(0.03, 0.05)));
    }

    #[test]
    fn parse_rules() {
        assert_eq!(
            "fixed:0.02".parse::<PrecisionRule>().unwrap(),
            PrecisionRule::fixed(0.02)
        );
        assert_eq!(
            "sqrt".parse::<PrecisionRule>().unwrap(),
            PrecisionRule::sqrt_profile(0.02)
        );
        assert_eq!(
            "band:0.1,0.02,0.05,0.95".parse::<PrecisionRule>().unwrap(),
            PrecisionRule::band(0.1, 0.02)
        );
        assert_eq!(
            "lefttail:0.02,0.05".parse::<PrecisionRule>().unwrap(),
            PrecisionRule::left_tail(0.02)
        );
        assert!("fixed:".parse::<PrecisionRule>().is_err());
        assert!("wobbly:1".parse::<PrecisionRule>().is_err());
        assert!("fixed:-1".parse::<PrecisionRule>().is_err());
    }

    #[test]
    fn custom_rule_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rule.txt");
        std::fs::write(&p, "# midpoint delta\n0 0.01\n0.5, 0.05\n1 0.01\n").unwrap();
        let r: PrecisionRule = format!("custom:{}", p.display()).parse().unwrap();
        assert!((r.delta_at(0.25).value - 0.03).abs() < 1e-12);
        assert!(r.admits(&centred(0.5, 0.05)));
        assert!(!r.admits(&centred(0.5, 0.051)));
        std::fs::write(&p, "0.2 0.01\n0.5 0.05\n").unwrap();
        assert!(PrecisionRule::custom_from_file(&p).is_err());
    }
}
