//! The choice-block search space: configurations, genotypes, validation,
//! sampling, mutation, counting and text formats.

mod count;
mod dot;
mod format;
mod sample;

pub use count::{operator_subset_count, space_cardinality};
pub use dot::to_dot;
pub use format::GenotypeError;
pub use sample::{mutate, mutate_traced, random_genotype, Mutation, MutationAction};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Operators of the dense branch (2-D activations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DenseOp {
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "SG")]
    SigmoidGating,
    #[serde(rename = "SUM")]
    Sum,
    #[serde(rename = "DP")]
    DotProduct,
}

/// Operators of the sparse branch (3-D embedding stacks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SparseOp {
    #[serde(rename = "EFC")]
    Efc,
    #[serde(rename = "ATTN")]
    Attention,
}

impl DenseOp {
    pub const ALL: [DenseOp; 4] = [DenseOp::Fc, DenseOp::SigmoidGating, DenseOp::Sum, DenseOp::DotProduct];

    pub fn name(self) -> &'static str {
        match self {
            DenseOp::Fc => "FC",
            DenseOp::SigmoidGating => "SG",
            DenseOp::Sum => "SUM",
            DenseOp::DotProduct => "DP",
        }
    }
}

impl SparseOp {
    pub const ALL: [SparseOp; 2] = [SparseOp::Efc, SparseOp::Attention];

    pub fn name(self) -> &'static str {
        match self {
            SparseOp::Efc => "EFC",
            SparseOp::Attention => "ATTN",
        }
    }
}

/// Search-space configuration shared by the supernet and every genotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub num_blocks: usize,
    pub dense_ops: Vec<DenseOp>,
    pub sparse_ops: Vec<SparseOp>,
    /// Output widths available to dense operators, strictly increasing.
    pub dense_dims: Vec<usize>,
    /// Output embedding counts available to sparse operators, strictly increasing.
    pub sparse_dims: Vec<usize>,
    pub allow_mergers: bool,
    pub weight_bits_choices: Vec<u8>,
    /// Embedding width, fixed across the space.
    pub dim_s: usize,
    pub attn_heads: usize,
    /// Project the sparse input of dot-product down to round(sqrt(2·dim)) embeddings.
    pub balanced_dp: bool,
}

impl SpaceConfig {
    /// All four dense operators, both sparse operators and mergers.
    pub fn full() -> Self {
        SpaceConfig {
            num_blocks: 7,
            dense_ops: DenseOp::ALL.to_vec(),
            sparse_ops: SparseOp::ALL.to_vec(),
            dense_dims: vec![16, 32, 64, 128, 256, 512, 768, 1024],
            sparse_dims: vec![16, 32, 48, 64],
            allow_mergers: true,
            weight_bits_choices: vec![8],
            dim_s: 16,
            attn_heads: 2,
            balanced_dp: true,
        }
    }

    /// FC and dot-product in the dense branch, EFC in the sparse branch.
    pub fn small() -> Self {
        SpaceConfig {
            dense_ops: vec![DenseOp::Fc, DenseOp::DotProduct],
            sparse_ops: vec![SparseOp::Efc],
            ..SpaceConfig::full()
        }
    }

    /// Hardware co-design space: crossbar-friendly operators with
    /// per-operator weight precision between 4 and 8 bits.
    pub fn codesign() -> Self {
        SpaceConfig {
            dense_dims: vec![64, 128, 256, 512, 768, 1024],
            weight_bits_choices: vec![4, 5, 6, 7, 8],
            ..SpaceConfig::small()
        }
    }

    pub fn max_dense_dim(&self) -> usize {
        self.dense_dims.last().copied().unwrap_or(0)
    }

    pub fn max_sparse_dim(&self) -> usize {
        self.sparse_dims.last().copied().unwrap_or(0)
    }

    pub fn max_bits(&self) -> u8 {
        self.weight_bits_choices.iter().copied().max().unwrap_or(8)
    }

    pub fn check(&self) -> Result<(), String> {
        let increasing = |v: &[usize]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]) && v[0] > 0;
        if self.num_blocks == 0 {
            return Err("num_blocks must be positive".into());
        }
        if self.dense_ops.is_empty() || self.sparse_ops.is_empty() {
            return Err("dense_ops and sparse_ops must be nonempty".into());
        }
        let dedup = |n: usize, m: usize| n == m;
        if !dedup(self.dense_ops.iter().collect::<BTreeSet<_>>().len(), self.dense_ops.len())
            || !dedup(self.sparse_ops.iter().collect::<BTreeSet<_>>().len(), self.sparse_ops.len())
        {
            return Err("operator lists contain duplicates".into());
        }
        if !increasing(&self.dense_dims) || !increasing(&self.sparse_dims) {
            return Err("dimension lists must be strictly increasing and positive".into());
        }
        if self.weight_bits_choices.is_empty() || self.weight_bits_choices.iter().any(|b| !(2..=16).contains(b)) {
            return Err("weight_bits_choices must be nonempty with values in [2, 16]".into());
        }
        if self.dim_s == 0 || self.attn_heads == 0 || !self.dim_s.is_multiple_of(self.attn_heads) {
            return Err(format!(
                "dim_s ({}) must be positive and divisible by attn_heads ({})",
                self.dim_s, self.attn_heads
            ));
        }
        Ok(())
    }
}

/// Sampled width and weight precision of one selected operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpChoice {
    pub dim: usize,
    pub bits: u8,
}

/// Source index of the raw input features in `BlockGene::connections`.
pub const RAW: usize = 0;

/// One choice block. Connection sources are `0` for the raw inputs and
/// `i` for the output of block `i` (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockGene {
    pub connections: BTreeSet<usize>,
    pub dense: BTreeMap<DenseOp, OpChoice>,
    pub sparse: BTreeMap<SparseOp, OpChoice>,
    pub d2s: bool,
    pub s2d: bool,
}

impl BlockGene {
    pub fn dense_width(&self) -> usize {
        self.dense.values().map(|c| c.dim).max().unwrap_or(0)
    }

    pub fn sparse_count(&self) -> usize {
        self.sparse.values().map(|c| c.dim).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadGene {
    pub bits: u8,
}

/// A concrete architecture: operators, connections and dimensions of every
/// block, followed by the logit head.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub blocks: Vec<BlockGene>,
    pub head: HeadGene,
}

/// A failed genotype invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BlockCount { expected: usize, found: usize },
    NoConnections { block: usize },
    ForwardConnection { block: usize, source: usize },
    FirstBlockNotRaw,
    DenseBranchEmpty { block: usize },
    SparseBranchEmpty { block: usize },
    OperatorNotInSpace { block: usize, op: &'static str },
    DimNotInSpace { block: usize, op: &'static str, dim: usize },
    BitsNotInSpace { block: usize, op: &'static str, bits: u8 },
    MergerNotAllowed { block: usize },
    NoPathToHead,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BlockCount { expected, found } => write!(f, "expected {expected} blocks, found {found}"),
            Violation::NoConnections { block } => write!(f, "block {block}: no connections"),
            Violation::ForwardConnection { block, source } => {
                write!(f, "block {block}: forward connection to B{source}")
            }
            Violation::FirstBlockNotRaw => write!(f, "block 1 must connect to raw inputs only"),
            Violation::DenseBranchEmpty { block } => write!(f, "block {block}: dense branch empty"),
            Violation::SparseBranchEmpty { block } => write!(f, "block {block}: sparse branch empty"),
            Violation::OperatorNotInSpace { block, op } => write!(f, "block {block}: operator {op} not in space"),
            Violation::DimNotInSpace { block, op, dim } => {
                write!(f, "block {block}: {op} dim {dim} not in space")
            }
            Violation::BitsNotInSpace { block, op, bits } => {
                write!(f, "block {block}: {op} bits {bits} not in space")
            }
            Violation::MergerNotAllowed { block } => write!(f, "block {block}: mergers disabled in this space"),
            Violation::NoPathToHead => write!(f, "no connection path from raw inputs to the last block"),
        }
    }
}

impl Genotype {
    /// Every operator at its widest setting with all connections: the
    /// genotype used for supernet warm-up.
    pub fn full(cfg: &SpaceConfig) -> Genotype {
        let bits = cfg.max_bits();
        let blocks = (1..=cfg.num_blocks)
            .map(|n| BlockGene {
                connections: (0..n).collect(),
                dense: cfg
                    .dense_ops
                    .iter()
                    .map(|&op| (op, OpChoice { dim: cfg.max_dense_dim(), bits }))
                    .collect(),
                sparse: cfg
                    .sparse_ops
                    .iter()
                    .map(|&op| (op, OpChoice { dim: cfg.max_sparse_dim(), bits }))
                    .collect(),
                d2s: cfg.allow_mergers,
                s2d: cfg.allow_mergers,
            })
            .collect();
        Genotype {
            blocks,
            head: HeadGene { bits },
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block `n` (1-based).
    pub fn block(&self, n: usize) -> &BlockGene {
        &self.blocks[n - 1]
    }

    /// Checks every invariant against `cfg`, collecting all violations.
    pub fn validate(&self, cfg: &SpaceConfig) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        if self.blocks.len() != cfg.num_blocks {
            v.push(Violation::BlockCount {
                expected: cfg.num_blocks,
                found: self.blocks.len(),
            });
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            if b.connections.is_empty() {
                v.push(Violation::NoConnections { block: n });
            }
            for &s in &b.connections {
                if s >= n {
                    v.push(Violation::ForwardConnection { block: n, source: s });
                }
            }
            if n == 1 && b.connections.iter().any(|&s| s != RAW) {
                v.push(Violation::FirstBlockNotRaw);
            }
            if b.dense.is_empty() {
                v.push(Violation::DenseBranchEmpty { block: n });
            }
            if b.sparse.is_empty() {
                v.push(Violation::SparseBranchEmpty { block: n });
            }
            for (op, c) in &b.dense {
                if !cfg.dense_ops.contains(op) {
                    v.push(Violation::OperatorNotInSpace { block: n, op: op.name() });
                }
                if !cfg.dense_dims.contains(&c.dim) {
                    v.push(Violation::DimNotInSpace {
                        block: n,
                        op: op.name(),
                        dim: c.dim,
                    });
                }
                if !cfg.weight_bits_choices.contains(&c.bits) {
                    v.push(Violation::BitsNotInSpace {
                        block: n,
                        op: op.name(),
                        bits: c.bits,
                    });
                }
            }
            for (op, c) in &b.sparse {
                if !cfg.sparse_ops.contains(op) {
                    v.push(Violation::OperatorNotInSpace { block: n, op: op.name() });
                }
                if !cfg.sparse_dims.contains(&c.dim) {
                    v.push(Violation::DimNotInSpace {
                        block: n,
                        op: op.name(),
                        dim: c.dim,
                    });
                }
                if !cfg.weight_bits_choices.contains(&c.bits) {
                    v.push(Violation::BitsNotInSpace {
                        block: n,
                        op: op.name(),
                        bits: c.bits,
                    });
                }
            }
            if !cfg.allow_mergers && (b.d2s || b.s2d) {
                v.push(Violation::MergerNotAllowed { block: n });
            }
        }
        if !self.blocks.is_empty() && !self.raw_reaches_last() {
            v.push(Violation::NoPathToHead);
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    fn raw_reaches_last(&self) -> bool {
        let mut reach = vec![false; self.blocks.len() + 1];
        reach[RAW] = true;
        for (i, b) in self.blocks.iter().enumerate() {
            reach[i + 1] = b.connections.iter().any(|&s| s < reach.len() && s <= i && reach[s]);
        }
        reach[self.blocks.len()]
    }

    /// `used[n]` for blocks `1..=N` (index 0 unused): whether block `n`'s
    /// output reaches the head through connections.
    pub fn used_blocks(&self) -> Vec<bool> {
        let n = self.blocks.len();
        let mut used = vec![false; n + 1];
        if n == 0 {
            return used;
        }
        used[n] = true;
        for i in (1..=n).rev() {
            if !used[i] {
                continue;
            }
            for &s in &self.blocks[i - 1].connections {
                if s != RAW && s < i {
                    used[s] = true;
                }
            }
        }
        used
    }

    /// Number of FC operators across all blocks.
    pub fn fc_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.dense.contains_key(&DenseOp::Fc)).count()
    }
}
