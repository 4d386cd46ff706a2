//! Two-sample permutation test on the difference of group means.
//!
//! The first `k` observations form the treated group G, the remaining `l` the
//! control group C. With the pooled total fixed, mean(G) − mean(C) is an
//! increasing function of the sum over G, so the one-sided test compares
//! group sums.

use std::cell::OnceCell;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Largest K + L accepted by [`exact_permutation_pvalue`].
pub const MAX_ENUMERATION: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationDataset {
    pub values: Vec<f64>,
    pub k: usize,
}

impl PermutationDataset {
    pub fn new(values: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 || k >= values.len() {
            return Err(Error::Config(format!(
                "group size {k} must lie in 1..{}",
                values.len()
            )));
        }
        Ok(Self { values, k })
    }

    pub fn observed_sum(&self) -> f64 {
        self.values[..self.k].iter().sum()
    }

    /// Slack under which a permuted sum counts as a tie with the observed one.
    fn tolerance(&self) -> f64 {
        1e-9 * (1.0 + self.values.iter().map(|x| x.abs()).sum::<f64>())
    }

    /// Observed statistic mean(G) − mean(C).
    pub fn statistic(&self) -> f64 {
        let l = self.values.len() - self.k;
        let g = self.observed_sum();
        let total: f64 = self.values.iter().sum();
        g / self.k as f64 - (total - g) / l as f64
    }
}

/// Draws K values from N(effect·σ, σ²) and L values from N(0, σ²).
pub fn simulate_dataset(
    k: usize,
    l: usize,
    effect: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> PermutationDataset {
    let treated = Normal::new(effect * sigma, sigma).expect("sigma > 0");
    let control = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut values = Vec::with_capacity(k + l);
    values.extend((0..k).map(|_| treated.sample(rng)));
    values.extend((0..l).map(|_| control.sample(rng)));
    PermutationDataset { values, k }
}

/// Exact one-sided p-value over all C(K+L, K) group assignments.
pub fn exact_permutation_pvalue(data: &PermutationDataset) -> Result<f64> {
    let n = data.values.len();
    if n > MAX_ENUMERATION {
        return Err(Error::Enumeration(format!(
            "{n} observations exceed the enumeration bound {MAX_ENUMERATION}"
        )));
    }
    let threshold = data.observed_sum() - data.tolerance();
    let mut hits = 0u64;
    let mut total = 0u64;
    let k = data.k as u32;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() != k {
            continue;
        }
        total += 1;
        let mut s = 0.0;
        let mut m = mask;
        while m != 0 {
            s += data.values[m.trailing_zeros() as usize];
            m &= m - 1;
        }
        if s >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Bits of one permutation-test stream: each bit draws a uniformly random
/// group assignment and reports whether it is at least as extreme.
#[derive(Debug, Clone)]
pub struct PermutationStream {
    data: PermutationDataset,
    threshold: f64,
    exact: OnceCell<Option<f64>>,
    rng: ChaCha8Rng,
}

impl PermutationStream {
    pub fn new(data: PermutationDataset, rng: ChaCha8Rng) -> Self {
        let threshold = data.observed_sum() - data.tolerance();
        Self {
            data,
            threshold,
            exact: OnceCell::new(),
            rng,
        }
    }

    pub fn dataset(&self) -> &PermutationDataset {
        &self.data
    }

    pub fn exact_pvalue(&self) -> Option<f64> {
        *self
            .exact
            .get_or_init(|| exact_permutation_pvalue(&self.data).ok())
    }

    pub fn bit(&mut self) -> bool {
        let n = self.data.values.len();
        let s: f64 = sample(&mut self.rng, n, self.data.k)
            .iter()
            .map(|i| self.data.values[i])
            .sum();
        s >= self.threshold
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::{stream_rng, SeedDomain};

    #[test]
    fn enumeration_has_495_assignments() {
        let values: Vec<f64> = (0..12).map(|i| i as f64).collect();
        // treated group holds the 4 largest values: only the observed assignment ties
        let mut v = values.clone();
        v.reverse();
        let d = PermutationDataset::new(v, 4).unwrap();
        let p = exact_permutation_pvalue(&d).unwrap();
        assert!((p - 1.0 / 495.0).abs() < 1e-15);
    }

    #[test]
    fn all_equal_gives_one() {
        let d = PermutationDataset::new(vec![2.5; 12], 4).unwrap();
        assert_eq!(exact_permutation_pvalue(&d).unwrap(), 1.0);
    }

    #[test]
    fn enumeration_bound() {
        let d = PermutationDataset::new(vec![0.0; 17], 4).unwrap();
        assert!(matches!(
            exact_permutation_pvalue(&d),
            Err(Error::Enumeration(_))
        ));
    }

    #[test]
    fn bit_frequency_matches_exact_pvalue() {
        for id in 0..20 {
            let mut rng = stream_rng(11, SeedDomain::Oracle, id);
            let data = simulate_dataset(4, 8, 1.0, 1.0, &mut rng);
            let mut s = PermutationStream::new(data, rng);
            let p = s.exact_pvalue().unwrap();
            let m = 10_000;
            let hits = (0..m).filter(|_| s.bit()).count() as f64;
            let se = (p * (1.0 - p) / m as f64).sqrt().max(1e-4);
            assert!(
                (hits / m as f64 - p).abs() <= 3.0 * se + 1e-12,
                "id={id} p={p} freq={}",
                hits / m as f64
            );
        }
    }
}
