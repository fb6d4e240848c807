//! Tabular CTR datasets: feature layout, in-memory storage, minibatches,
//! the train/validation/test split, a synthetic generator with a planted
//! teacher, a Criteo-format TSV loader and a binary columnar cache.

mod cache;
mod synth;
mod tsv;

pub use cache::{read_cache, write_cache, CacheError};
pub use synth::{synth_generate, SynthConfig};
pub use tsv::{hash_token, load_criteo_tsv, TsvError};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Default per-field embedding table cap.
pub const EMBEDDING_CAP: usize = 500_000;

/// Raw feature layout: dense feature count and the (capped) vocabulary of
/// every sparse field. Id 0 of each field is reserved for missing values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub num_dense: usize,
    pub vocab: Vec<usize>,
}

impl FeatureSpec {
    pub fn new(num_dense: usize, num_sparse: usize, vocab: usize) -> Self {
        FeatureSpec {
            num_dense,
            vocab: vec![vocab; num_sparse],
        }
    }

    /// 13 dense and 26 sparse fields.
    pub fn criteo(vocab: usize) -> Self {
        FeatureSpec::new(13, 26, vocab)
    }

    /// 23 sparse fields, no dense features.
    pub fn avazu(vocab: usize) -> Self {
        FeatureSpec::new(0, 23, vocab)
    }

    /// 3 dense and 10 sparse fields.
    pub fn kdd(vocab: usize) -> Self {
        FeatureSpec::new(3, 10, vocab)
    }

    pub fn num_sparse(&self) -> usize {
        self.vocab.len()
    }

    /// Applies the embedding cap to every field.
    pub fn capped(mut self, cap: usize) -> Self {
        for v in &mut self.vocab {
            *v = (*v).min(cap);
        }
        self
    }

    /// Row offset of each field in a single concatenated embedding table.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.vocab
            .iter()
            .map(|v| {
                let o = acc;
                acc += v;
                o
            })
            .collect()
    }

    pub fn total_vocab(&self) -> usize {
        self.vocab.iter().sum()
    }

    pub fn check(&self) -> Result<(), String> {
        if self.vocab.is_empty() {
            return Err("feature spec has no sparse fields".into());
        }
        if self.vocab.iter().any(|&v| v < 2) {
            return Err("every sparse vocabulary needs at least 2 ids (0 is reserved)".into());
        }
        Ok(())
    }
}

/// Row-major in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: FeatureSpec,
    /// `rows × num_dense`, already log-transformed.
    pub dense: Vec<f64>,
    /// `rows × num_sparse`, field-local ids below each field's vocabulary.
    pub ids: Vec<u32>,
    pub labels: Vec<f64>,
}

/// One minibatch ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    /// `[B×num_dense]`.
    pub dense: Tensor,
    /// `B×num_sparse` field-local ids, row-major.
    pub ids: Vec<usize>,
    pub labels: Vec<f64>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn empty(spec: FeatureSpec) -> Self {
        Dataset {
            spec,
            dense: Vec::new(),
            ids: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dense_row(&self, r: usize) -> &[f64] {
        let d = self.spec.num_dense;
        &self.dense[r * d..(r + 1) * d]
    }

    pub fn id_row(&self, r: usize) -> &[u32] {
        let f = self.spec.num_sparse();
        &self.ids[r * f..(r + 1) * f]
    }

    pub fn push(&mut self, dense: &[f64], ids: &[u32], label: f64) {
        self.dense.extend_from_slice(dense);
        self.ids.extend_from_slice(ids);
        self.labels.push(label);
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.spec.clone());
        out.dense.reserve(idx.len() * self.spec.num_dense);
        out.ids.reserve(idx.len() * self.spec.num_sparse());
        for &r in idx {
            out.push(self.dense_row(r), self.id_row(r), self.labels[r]);
        }
        out
    }

    /// Leading `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn batch(&self, idx: &[usize]) -> FeatureBatch {
        let d = self.spec.num_dense;
        let mut dense = Vec::with_capacity(idx.len() * d);
        let mut ids = Vec::with_capacity(idx.len() * self.spec.num_sparse());
        let mut labels = Vec::with_capacity(idx.len());
        for &r in idx {
            dense.extend_from_slice(self.dense_row(r));
            ids.extend(self.id_row(r).iter().map(|&i| i as usize));
            labels.push(self.labels[r]);
        }
        FeatureBatch {
            dense: Tensor::new(vec![idx.len(), d], dense).expect("batch shape"),
            ids,
            labels,
        }
    }

    /// Contiguous batches of at most `size` rows in storage order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = FeatureBatch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| {
            let idx: Vec<usize> = (s..(s + size).min(self.len())).collect();
            self.batch(&idx)
        })
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().sum::<f64>() / self.len() as f64
    }

    /// SHA-256 of the cache encoding, hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(cache::encode(self));
        hex::encode(h.finalize())
    }
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle into 80% / 10% / 10%.
pub fn split(data: &Dataset, seed: u64) -> Split {
    let (tr, va, _) = split_sizes(data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Split {
        train: data.subset(&idx[..tr]),
        val: data.subset(&idx[tr..tr + va]),
        test: data.subset(&idx[tr + va..]),
    }
}

/// Partition sizes for `n` rows.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        synth_generate(&SynthConfig {
            rows: n,
            spec: FeatureSpec::new(2, 3, 10),
            seed: 1,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn split_sizes_union_and_determinism() {
        for n in [10, 11, 99, 1000, 1003] {
            let d = toy(n);
            let s = split(&d, 5);
            let (a, b, c) = (s.train.len(), s.val.len(), s.test.len());
            assert_eq!(a + b + c, n);
            assert!((a as f64 - 0.8 * n as f64).abs() <= 1.0);
            assert!((b as f64 - 0.1 * n as f64).abs() <= 1.0);
            assert!((c as f64 - 0.1 * n as f64).abs() <= 1.0);
            assert_eq!(split(&d, 5), s);
        }
        // Union: every row appears exactly once (rows are distinguishable by
        // their full content with overwhelming probability, so compare
        // multisets of encoded rows).
        let d = toy(500);
        let s = split(&d, 9);
        let key = |ds: &Dataset, r: usize| format!("{:?}{:?}{}", ds.dense_row(r), ds.id_row(r), ds.labels[r]);
        let mut all: Vec<String> = (0..d.len()).map(|r| key(&d, r)).collect();
        let mut parts: Vec<String> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|p| (0..p.len()).map(move |r| key(p, r)))
            .collect();
        all.sort();
        parts.sort();
        assert_eq!(all, parts);
    }

    #[test]
    fn batches_cover_rows_in_order() {
        let d = toy(25);
        let bs: Vec<FeatureBatch> = d.batches(10).collect();
        assert_eq!(bs.iter().map(FeatureBatch::len).collect::<Vec<_>>(), vec![10, 10, 5]);
        assert_eq!(bs[2].labels, d.labels[20..]);
        assert_eq!(bs[0].dense.shape(), &[10, 2]);
        assert_eq!(bs[0].ids.len(), 30);
    }

    #[test]
    fn spec_presets() {
        assert_eq!(FeatureSpec::criteo(10).num_dense, 13);
        assert_eq!(FeatureSpec::criteo(10).num_sparse(), 26);
        assert_eq!(FeatureSpec::avazu(10).num_dense, 0);
        assert_eq!(FeatureSpec::avazu(10).num_sparse(), 23);
        assert_eq!(FeatureSpec::kdd(10).num_sparse(), 10);
        assert_eq!(FeatureSpec::new(1, 2, 9_000_000).capped(EMBEDDING_CAP).vocab, vec![500_000; 2]);
        assert_eq!(FeatureSpec::new(0, 3, 4).offsets(), vec![0, 4, 8]);
        assert!(FeatureSpec::new(3, 0, 4).check().is_err());
    }
}
