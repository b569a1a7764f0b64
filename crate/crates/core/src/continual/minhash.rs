use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::seed;

/// Mersenne prime `2^61 - 1`, the modulus of the universal hash family.
const PRIME: u64 = (1 << 61) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub shingle_len: usize,
    pub num_hashes: usize,
    /// Candidates at or above this estimated Jaccard similarity to a kept
    /// candidate are dropped.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { shingle_len: 3, num_hashes: 128, threshold: 0.8, seed: 0x5eed }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shingle_len == 0 {
            return Err(Error::Config("shingle_len must be >= 1".into()));
        }
        if self.num_hashes < 16 {
            return Err(Error::Config("num_hashes must be >= 16".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("dedup threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn fnv1a(tokens: &[Token]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Hashed contiguous `len`-grams. A sequence shorter than `len` is one shingle.
pub fn shingles(tokens: &[Token], len: usize) -> BTreeSet<u64> {
    if tokens.len() <= len {
        return std::iter::once(fnv1a(tokens)).collect();
    }
    tokens.windows(len).map(fnv1a).collect()
}

pub fn exact_jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `num_hashes` functions `h -> (a h + b) mod p` with seeded `a`, `b`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
    shingle_len: usize,
}

impl MinHasher {
    pub fn new(cfg: &DedupConfig) -> Self {
        let mut rng = seed::rng(cfg.seed);
        let coeffs = (0..cfg.num_hashes).map(|_| (rng.gen_range(1..PRIME), rng.gen_range(0..PRIME))).collect();
        Self { coeffs, shingle_len: cfg.shingle_len }
    }

    pub fn signature(&self, tokens: &[Token]) -> Vec<u64> {
        minhash_signature(&shingles(tokens, self.shingle_len), &self.coeffs)
    }
}

pub fn minhash_signature(shingles: &BTreeSet<u64>, coeffs: &[(u64, u64)]) -> Vec<u64> {
    coeffs
        .iter()
        .map(|&(a, b)| {
            shingles
                .iter()
                .map(|&h| ((a as u128 * (h % PRIME) as u128 + b as u128) % PRIME as u128) as u64)
                .min()
                .unwrap_or(u64::MAX)
        })
        .collect()
}

/// Fraction of agreeing signature slots, the Jaccard estimate.
pub fn signature_similarity(a: &[u64], b: &[u64]) -> f64 {
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let h = MinHasher::new(&DedupConfig::default());
        let a: Vec<Token> = (0..20).collect();
        let b: Vec<Token> = (100..120).collect();
        assert_eq!(signature_similarity(&h.signature(&a), &h.signature(&a)), 1.0);
        assert!(signature_similarity(&h.signature(&a), &h.signature(&b)) < 0.05);
        assert_eq!(shingles(&[1, 2], 3).len(), 1);
    }

    #[test]
    fn validation() {
        assert!(DedupConfig { num_hashes: 8, ..Default::default() }.validate().is_err());
        assert!(DedupConfig { shingle_len: 0, ..Default::default() }.validate().is_err());
    }
}
