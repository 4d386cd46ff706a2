//! Stream sources.
//!
//! A stream is the bit sequence X_1, X_2, … of one simulated dataset: each
//! bit says whether a resampled statistic is at least as extreme as the
//! observed one, so bits are i.i.d. Bernoulli(p) given the dataset's p-value.
//!
//! Every built-in stream owns a ChaCha generator keyed by (root seed, domain,
//! stream id), which makes its bits independent of scheduling.

mod external;
mod permutation;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SamplerError};

pub use external::{ExternalPool, DEFAULT_BIT_TIMEOUT};
pub use permutation::{
    exact_permutation_pvalue, simulate_dataset, PermutationDataset, PermutationStream,
    MAX_ENUMERATION,
};

/// Seed domains separating the independent uses of one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedDomain {
    Main = 1,
    Pilot = 2,
    Naive = 3,
    Planner = 4,
    Oracle = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for stream `id` in `domain`, a pure function of its arguments.
pub fn stream_rng(seed: u64, domain: SeedDomain, id: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// p ~ Beta(1, x)
    Beta {
        x: f64,
    },
    /// Beta(1, x) with x chosen so that P[p ≤ α] = power; see [`SamplerSpec::resolve`].
    BetaPower {
        power: f64,
    },
    FixedP {
        p: f64,
    },
    Discrete {
        support: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Two-sample Gaussian mean-difference permutation test.
    Permutation {
        k: usize,
        l: usize,
        effect: f64,
        sigma: f64,
    },
    /// Child process speaking the line protocol.
    External {
        command: String,
        args: Vec<String>,
    },
}

/// x with 1 − (1 − α)^x = β, so that Beta(1, x) has power β at level α.
pub fn beta_parameter_for_power(alpha: f64, beta: f64) -> f64 {
    (-beta).ln_1p() / (-alpha).ln_1p()
}

impl SamplerSpec {
    /// Replaces level-dependent shorthands by concrete parameters.
    pub fn resolve(self, alpha: f64) -> SamplerSpec {
        match self {
            SamplerSpec::BetaPower { power } => SamplerSpec::Beta {
                x: beta_parameter_for_power(alpha, power),
            },
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Sampler(SamplerError::Spec(m)));
        match self {
            SamplerSpec::Beta { x } if !(*x > 0.0 && x.is_finite()) => {
                bad(format!("beta x must be positive, got {x}"))
            }
            SamplerSpec::BetaPower { power } if !(*power > 0.0 && *power < 1.0) => {
                bad(format!("beta power must lie in (0,1), got {power}"))
            }
            SamplerSpec::FixedP { p } if !(0.0..=1.0).contains(p) => {
                bad(format!("fixed p must lie in [0,1], got {p}"))
            }
            SamplerSpec::Discrete { support, weights } => {
                if support.is_empty() || support.len() != weights.len() {
                    return bad(
                        "discrete support and weights must be nonempty and of equal length".into(),
                    );
                }
                if support.iter().any(|p| !(0.0..=1.0).contains(p))
                    || weights.iter().any(|w| !(*w >= 0.0))
                {
                    return bad("discrete atoms must lie in [0,1] with nonnegative weights".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("discrete weights sum to {total}, not 1"));
                }
                Ok(())
            }
            SamplerSpec::Permutation {
                k,
                l,
                sigma,
                effect,
            } => {
                if *k == 0 || *l == 0 || !(*sigma > 0.0) || !effect.is_finite() {
                    bad("permutation needs K, L ≥ 1 and sigma > 0".into())
                } else {
                    Ok(())
                }
            }
            SamplerSpec::External { command, .. } if command.trim().is_empty() => {
                bad("external command is empty".into())
            }
            _ => Ok(()),
        }
    }

    /// β = F(α) when it is known in closed form.
    pub fn true_power(&self, alpha: f64) -> Option<f64> {
        match self {
            SamplerSpec::Beta { x } => Some(-((x * (-alpha).ln_1p()).exp_m1())),
            SamplerSpec::BetaPower { power } => Some(*power),
            SamplerSpec::FixedP { p } => Some(if *p <= alpha { 1.0 } else { 0.0 }),
            SamplerSpec::Discrete { support, weights } => Some(
                support
                    .iter()
                    .zip(weights)
                    .filter(|(p, _)| **p <= alpha)
                    .map(|(_, w)| *w)
                    .sum(),
            ),
            _ => None,
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, SamplerSpec::External { .. })
    }
}

fn parse_kv(body: &str) -> Result<Vec<(String, String)>> {
    // split on commas that are not inside double quotes
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for c in body.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                cur.push(c);
            }
            ',' if !quoted => parts.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if !cur.is_empty() {
        parts.push(cur);
    }
    parts
        .into_iter()
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| SamplerError::Spec(format!("expected key=value, got {p:?}")))?;
            let v = v.trim();
            let v = v
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(v);
            Ok((k.trim().to_ascii_lowercase(), v.to_string()))
        })
        .collect()
}

fn num(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| SamplerError::Spec(format!("bad number for {key}: {v:?}")).into())
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split('|').map(|x| num(key, x.trim())).collect()
}

impl FromStr for SamplerSpec {
    type Err = Error;

    /// `beta:x=23.47 | beta:power=0.7 | fixed:p=0.03 |
    /// discrete:p=0.01|0.5,w=0.3|0.7 | perm:K=4,L=8,effect=1.0[,sigma=1] |
    /// ext:cmd="..."`
    fn from_str(s: &str) -> Result<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        let kv = parse_kv(body)?;
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let need = |key: &str| {
            get(key).ok_or_else(|| {
                Error::from(SamplerError::Spec(format!(
                    "sampler {s:?} is missing {key}="
                )))
            })
        };
        let spec = match kind.trim() {
            "beta" => match (get("x"), get("power")) {
                (Some(x), None) => SamplerSpec::Beta { x: num("x", x)? },
                (None, Some(p)) => SamplerSpec::BetaPower {
                    power: num("power", p)?,
                },
                _ => {
                    return Err(
                        SamplerError::Spec("beta needs exactly one of x= or power=".into()).into(),
                    )
                }
            },
            "fixed" => SamplerSpec::FixedP {
                p: num("p", need("p")?)?,
            },
            "discrete" => SamplerSpec::Discrete {
                support: list("p", need("p")?)?,
                weights: list("w", need("w")?)?,
            },
            "perm" => SamplerSpec::Permutation {
                k: num("k", need("k")?)? as usize,
                l: num("l", need("l")?)? as usize,
                effect: num("effect", need("effect")?)?,
                sigma: get("sigma")
                    .map(|v| num("sigma", v))
                    .transpose()?
                    .unwrap_or(1.0),
            },
            "ext" => SamplerSpec::External {
                command: need("cmd")?.to_string(),
                args: Vec::new(),
            },
            other => {
                return Err(SamplerError::Spec(format!("unknown sampler kind {other:?}")).into())
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerSpec::Beta { x } => write!(f, "beta:x={x}"),
            SamplerSpec::BetaPower { power } => write!(f, "beta:power={power}"),
            SamplerSpec::FixedP { p } => write!(f, "fixed:p={p}"),
            SamplerSpec::Discrete { support, weights } => {
                let j = |v: &[f64]| {
                    v.iter()
                        .map(|x| x.to_string())
                        .collect::<Vec<_>>()
                        .join("|")
                };
                write!(f, "discrete:p={},w={}", j(support), j(weights))
            }
            SamplerSpec::Permutation {
                k,
                l,
                effect,
                sigma,
            } => {
                write!(f, "perm:K={k},L={l},effect={effect},sigma={sigma}")
            }
            SamplerSpec::External { command, args } => {
                if args.is_empty() {
                    write!(f, "ext:cmd=\"{command}\"")
                } else {
                    write!(f, "ext:cmd=\"{command} {}\"", args.join(" "))
                }
            }
        }
    }
}

/// One stream's bit source.
#[derive(Debug)]
pub enum StreamSource {
    Bernoulli {
        p: f64,
        rng: ChaCha8Rng,
    },
    Permutation(permutation::PermutationStream),
    External {
        pool: Arc<ExternalPool>,
        id: u64,
        opened: bool,
    },
}

impl StreamSource {
    /// Draws `n` bits and returns how many were 1.
    pub fn draw(&mut self, n: u64) -> Result<u64, SamplerError> {
        match self {
            StreamSource::Bernoulli { p, rng } => Ok(bernoulli_block(*p, n, rng)),
            StreamSource::Permutation(s) => Ok((0..n).filter(|_| s.bit()).count() as u64),
            StreamSource::External { pool, id, opened } => {
                if !*opened {
                    pool.open(*id)?;
                    *opened = true;
                }
                let mut ones = 0;
                for _ in 0..n {
                    ones += pool.bit(*id)? as u64;
                }
                Ok(ones)
            }
        }
    }

    /// Whether `draw(n)` for n > 1 is cheaper than n single draws.
    pub fn supports_blocks(&self) -> bool {
        matches!(self, StreamSource::Bernoulli { .. })
    }

    /// The stream's success probability when it is known.
    pub fn known_p(&self) -> Option<f64> {
        match self {
            StreamSource::Bernoulli { p, .. } => Some(*p),
            StreamSource::Permutation(s) => s.exact_pvalue(),
            StreamSource::External { .. } => None,
        }
    }

    /// Position of the stream's generator, for checkpoints.
    pub fn word_pos(&self) -> Option<u128> {
        match self {
            StreamSource::Bernoulli { rng, .. } => Some(rng.get_word_pos()),
            StreamSource::Permutation(s) => Some(s.word_pos()),
            StreamSource::External { .. } => None,
        }
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        match self {
            StreamSource::Bernoulli { rng, .. } => rng.set_word_pos(pos),
            StreamSource::Permutation(s) => s.set_word_pos(pos),
            StreamSource::External { .. } => {}
        }
    }
}

fn bernoulli_block(p: f64, n: u64, rng: &mut ChaCha8Rng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    if n == 1 {
        return (rng.random::<f64>() < p) as u64;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Creates the streams of one run from a sampler specification.
#[derive(Debug, Clone)]
pub struct StreamFactory {
    spec: SamplerSpec,
    seed: u64,
    external: Option<Arc<ExternalPool>>,
}

impl StreamFactory {
    /// `external_procs` children are spawned for an external spec.
    pub fn new(spec: SamplerSpec, seed: u64, external_procs: usize) -> Result<Self> {
        spec.validate()?;
        if let SamplerSpec::BetaPower { .. } = spec {
            return Err(SamplerError::Spec(
                "beta:power= must be resolved against alpha first".into(),
            )
            .into());
        }
        let external = match &spec {
            SamplerSpec::External { command, args } => Some(Arc::new(ExternalPool::spawn(
                command,
                args,
                external_procs.max(1),
                DEFAULT_BIT_TIMEOUT,
            )?)),
            _ => None,
        };
        Ok(Self {
            spec,
            seed,
            external,
        })
    }

    pub fn with_external_pool(spec: SamplerSpec, seed: u64, pool: Arc<ExternalPool>) -> Self {
        Self {
            spec,
            seed,
            external: Some(pool),
        }
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn new_stream(&self, domain: SeedDomain, id: u64) -> StreamSource {
        let mut rng = stream_rng(self.seed, domain, id);
        match &self.spec {
            SamplerSpec::Beta { x } => {
                // inverse CDF of Beta(1, x): 1 − U^{1/x}
                let u: f64 = rng.random();
                let p = -((u.ln() / x).exp_m1());
                StreamSource::Bernoulli { p, rng }
            }
            SamplerSpec::FixedP { p } => StreamSource::Bernoulli { p: *p, rng },
            SamplerSpec::Discrete { support, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut p = *support.last().unwrap();
                for (s, w) in support.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        p = *s;
                        break;
                    }
                }
                StreamSource::Bernoulli { p, rng }
            }
            SamplerSpec::Permutation {
                k,
                l,
                effect,
                sigma,
            } => {
                let data = simulate_dataset(*k, *l, *effect, *sigma, &mut rng);
                StreamSource::Permutation(permutation::PermutationStream::new(data, rng))
            }
            SamplerSpec::External { .. } => StreamSource::External {
                pool: Arc::clone(self.external.as_ref().expect("external pool")),
                id,
                opened: false,
            },
            SamplerSpec::BetaPower { .. } => unreachable!("rejected in StreamFactory::new"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_parameter_examples() {
        assert!((beta_parameter_for_power(0.05, 0.05) - 1.0).abs() < 1e-12);
        assert!((beta_parameter_for_power(0.05, 0.7) - 23.47).abs() < 0.01);
        assert!((beta_parameter_for_power(0.05, 0.9) - 44.89).abs() < 0.01);
        assert!((beta_parameter_for_power(0.05, 0.99) - 89.78).abs() < 0.01);
    }

    #[test]
    fn beta_power_roundtrip() {
        for &a in &[0.001, 0.01, 0.05, 0.2] {
            for &b in &[0.01, 0.3, 0.7, 0.99] {
                let x = beta_parameter_for_power(a, b);
                let back = SamplerSpec::Beta { x }.true_power(a).unwrap();
                assert!((back - b).abs() < 1e-12, "a={a} b={b}");
            }
        }
        assert_eq!(SamplerSpec::Beta { x: 1.0 }.true_power(0.05).unwrap(), 0.05);
    }

    #[test]
    fn parse_and_display() {
        let s: SamplerSpec = "beta:x=23.47".parse().unwrap();
        assert_eq!(s, SamplerSpec::Beta { x: 23.47 });
        let s: SamplerSpec = "perm:K=4,L=8,effect=1.0".parse().unwrap();
        assert_eq!(
            s,
            SamplerSpec::Permutation {
                k: 4,
                l: 8,
                effect: 1.0,
                sigma: 1.0
            }
        );
        let s: SamplerSpec = "ext:cmd=\"python3 child.py --a=1,2\"".parse().unwrap();
        assert_eq!(
            s,
            SamplerSpec::External {
                command: "python3 child.py --a=1,2".into(),
                args: vec![]
            }
        );
        let s: SamplerSpec = "discrete:p=0.01|0.05|0.5,w=0.2|0.3|0.5".parse().unwrap();
        let back: SamplerSpec = s.to_string().parse().unwrap();
        assert_eq!(s, back);
        assert!("beta:x=-1".parse::<SamplerSpec>().is_err());
        assert!("discrete:p=0.1|0.2,w=0.5|0.6"
            .parse::<SamplerSpec>()
            .is_err());
        assert!("perm:K=0,L=8,effect=1".parse::<SamplerSpec>().is_err());
        assert!("gauss:mu=1".parse::<SamplerSpec>().is_err());
    }

    #[test]
    fn degenerate_streams() {
        let f = StreamFactory::new(SamplerSpec::FixedP { p: 0.0 }, 1, 1).unwrap();
        let mut s = f.new_stream(SeedDomain::Main, 3);
        assert_eq!(s.draw(1000).unwrap(), 0);
        let f = StreamFactory::new(SamplerSpec::FixedP { p: 1.0 }, 1, 1).unwrap();
        let mut s = f.new_stream(SeedDomain::Main, 3);
        assert_eq!(s.draw(17).unwrap(), 17);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let f = StreamFactory::new(SamplerSpec::Beta { x: 1.0 }, 42, 1).unwrap();
        let a = f.new_stream(SeedDomain::Main, 5).known_p().unwrap();
        let b = f.new_stream(SeedDomain::Main, 5).known_p().unwrap();
        let c = f.new_stream(SeedDomain::Main, 6).known_p().unwrap();
        let d = f.new_stream(SeedDomain::Pilot, 5).known_p().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn uniform_pvalues_have_level_power() {
        let f = StreamFactory::new(SamplerSpec::Beta { x: 1.0 }, 7, 1).unwrap();
        let n = 200_000;
        let hits = (0..n)
            .filter(|&i| f.new_stream(SeedDomain::Main, i).known_p().unwrap() <= 0.05)
            .count();
        let freq = hits as f64 / n as f64;
        let se = (0.05 * 0.95 / n as f64).sqrt();
        assert!((freq - 0.05).abs() < 4.0 * se, "{freq}");
    }

    #[test]
    fn discrete_model_atom_at_alpha() {
        // atoms at 0.01, α = 0.05 and 0.5; shifting α to 0.06 loses no power
        let spec = SamplerSpec::Discrete {
            support: vec![0.01, 0.05, 0.5],
            weights: vec![0.2, 0.3, 0.5],
        };
        let at_alpha = spec.true_power(0.05).unwrap();
        let shifted = spec.true_power(0.06).unwrap();
        assert!((at_alpha - 0.5).abs() < 1e-15);
        assert_eq!(at_alpha, shifted);
        let f = StreamFactory::new(spec, 3, 1).unwrap();
        let atoms: Vec<f64> = (0..2000)
            .map(|i| f.new_stream(SeedDomain::Main, i).known_p().unwrap())
            .collect();
        assert!(atoms.iter().all(|p| [0.01, 0.05, 0.5].contains(p)));
        assert!(atoms.iter().all(|p| *p != 0.06));
    }

    #[test]
    fn block_draws_match_binomial_mean() {
        let f = StreamFactory::new(SamplerSpec::FixedP { p: 0.3 }, 9, 1).unwrap();
        let mut s = f.new_stream(SeedDomain::Main, 0);
        let total: u64 = (0..1000).map(|_| s.draw(100).unwrap()).sum();
        let mean = total as f64 / 100_000.0;
        assert!((mean - 0.3).abs() < 4.0 * (0.21f64 / 1e5).sqrt());
    }
}
