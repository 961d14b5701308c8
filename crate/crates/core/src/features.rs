//! Hashed token n-gram features.
//!
//! Code is split into identifier/number runs and single punctuation
//! characters, truncated to the token budget (keeping the front of the
//! function), and unigrams plus bigrams are hashed into `dim` signed buckets.
//! The resulting vector is L2-normalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    pub token_budget: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: 4096,
            token_budget: 2048,
        }
    }
}

/// Unit-norm (or zero) vector stored sparsely; indices are sorted and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(index, value)` pairs; duplicates are summed and zeros dropped.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in pairs {
            assert!(i < dim, "feature index {i} out of range for dim {dim}");
            *acc.entry(i).or_insert(0.0) += v;
        }
        let (indices, values) = acc.into_iter().filter(|(_, v)| *v != 0.0).unzip();
        Self { dim, indices, values }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self::from_pairs(values.len(), values.iter().copied().enumerate())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        }
        self
    }

    /// Same support, values replaced through `f(position, value)`; zero results are dropped.
    pub fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for (pos, (i, v)) in self.iter().enumerate() {
            let nv = f(pos, v);
            if nv != 0.0 {
                indices.push(i);
                values.push(nv);
            }
        }
        Self {
            dim: self.dim,
            indices,
            values,
        }
    }
}

pub fn tokenize(code: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (pos, c) in code.char_indices() {
        let word = c.is_alphanumeric() || c == '_';
        match (word, start) {
            (true, None) => start = Some(pos),
            (true, Some(_)) => {}
            (false, Some(s)) => {
                tokens.push(&code[s..pos]);
                start = None;
            }
            (false, None) => {}
        }
        if !word && !c.is_whitespace() {
            tokens.push(&code[pos..pos + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        tokens.push(&code[s..]);
    }
    tokens
}

// FNV-1a, 64-bit.
fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for (n, part) in parts.iter().enumerate() {
        if n > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for b in part.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn featurize(code: &str, config: &FeatureConfig) -> FeatureVector {
    assert!(config.token_budget > 0, "token budget must be positive");
    let mut tokens = tokenize(code);
    tokens.truncate(config.token_budget);
    let dim = config.dim as u64;
    let bucket = |h: u64| -> (usize, f64) {
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % dim) as usize, sign)
    };
    let unigrams = tokens.iter().map(|t| bucket(fnv1a(1, &[t])));
    let bigrams = tokens.windows(2).map(|w| bucket(fnv1a(2, w)));
    FeatureVector::from_pairs(config.dim, unigrams.chain(bigrams)).normalized()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_words_and_punctuation() {
        assert_eq!(tokenize("a_1=b(c);"), vec!["a_1", "=", "b", "(", "c", ")", ";"]);
        assert!(tokenize("  \n").is_empty());
    }

    #[test]
    fn empty_code_is_zero_vector() {
        let fv = featurize("", &FeatureConfig::default());
        assert!(fv.is_zero());
        assert_eq!(fv.norm(), 0.0);
    }

    #[test]
    fn featurize_is_deterministic_and_unit_norm() {
        let cfg = FeatureConfig::default();
        let a = featurize("int main() { return strcpy(dst, src); }", &cfg);
        let b = featurize("int main() { return strcpy(dst, src); }", &cfg);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokens_beyond_budget_are_ignored() {
        let cfg = FeatureConfig {
            dim: 512,
            token_budget: 3,
        };
        assert_eq!(featurize("a b c d e f", &cfg), featurize("a b c zz yy", &cfg));
        assert_ne!(featurize("a b c", &cfg), featurize("a b d", &cfg));
    }
}
