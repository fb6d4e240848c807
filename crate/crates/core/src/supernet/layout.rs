use serde::{Deserialize, Serialize};

use crate::data::FeatureSpec;
use crate::ops::{self, balance_width, OpKind, OpSpec, D2S_EMBEDDINGS};
use crate::space::{DenseOp, Genotype, SpaceConfig, SparseOp, RAW};

/// Global coordinates of every block input at maximal size.
///
/// Dense features of the raw input occupy rows `[0, D)` of a block's dense
/// input space, and the output of block `i` occupies
/// `D + (i-1)·max_d + [0, w_i)`. Sparse embeddings are laid out the same
/// way with a stride of `max_n + K` per block, where `K` slots are reserved
/// for dense-to-sparse merger embeddings. Weight rows are indexed by these
/// positions, so a subnet selects rows rather than reallocating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub num_blocks: usize,
    pub num_dense: usize,
    pub num_sparse: usize,
    pub dim_s: usize,
    pub heads: usize,
    pub max_d: usize,
    pub max_n: usize,
    /// Merger slots per block (0 when mergers are disabled).
    pub merge_k: usize,
    pub balanced: bool,
    pub vocab: Vec<usize>,
}

impl Layout {
    pub fn new(cfg: &SpaceConfig, features: &FeatureSpec) -> Layout {
        Layout {
            num_blocks: cfg.num_blocks,
            num_dense: features.num_dense,
            num_sparse: features.num_sparse(),
            dim_s: cfg.dim_s,
            heads: cfg.attn_heads,
            max_d: cfg.max_dense_dim(),
            max_n: cfg.max_sparse_dim(),
            merge_k: if cfg.allow_mergers { D2S_EMBEDDINGS } else { 0 },
            balanced: cfg.balanced_dp,
            vocab: features.vocab.clone(),
        }
    }

    pub fn dense_offset(&self, src: usize) -> usize {
        if src == RAW {
            0
        } else {
            self.num_dense + (src - 1) * self.max_d
        }
    }

    pub fn sparse_offset(&self, src: usize) -> usize {
        if src == RAW {
            0
        } else {
            self.num_sparse + (src - 1) * (self.max_n + self.merge_k)
        }
    }

    /// Dense input rows of block `n` with every connection at full width.
    pub fn din_max(&self, n: usize) -> usize {
        self.dense_offset(n)
    }

    /// Sparse input embeddings of block `n` under the all-connections
    /// genotype.
    pub fn nin_max(&self, n: usize) -> usize {
        self.sparse_offset(n)
    }

    /// Widest single source: gate and norm width of SG and SUM.
    pub fn binary_max(&self) -> usize {
        self.num_dense.max(self.max_d)
    }

    pub fn balance_max(&self) -> usize {
        balance_width(self.max_d)
    }

    /// Stack height of the dot-product interaction in global indexing:
    /// slot 0 is the dense row, slot `1 + p` the sparse (or balanced) row `p`.
    pub fn dp_slots(&self, n: usize) -> usize {
        1 + if self.balanced { self.balance_max() } else { self.nin_max(n) }
    }

    /// Row of pair `(i, j)`, `i < j`, in the strict upper triangle of a
    /// `slots × slots` matrix flattened row by row.
    pub fn pair_index(slots: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < slots);
        i * slots - i * (i + 1) / 2 + (j - i - 1)
    }

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
}

/// Resolved shapes of one block for a particular genotype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    /// 1-based block index.
    pub block: usize,
    pub sources: Vec<usize>,
    /// Global dense rows of the concatenated input.
    pub dense_rows: Vec<usize>,
    /// Global sparse positions of the concatenated input.
    pub sparse_pos: Vec<usize>,
    /// First and last source, the operands of SG and SUM.
    pub x1: usize,
    pub x2: usize,
    /// Dense output width.
    pub width: usize,
    /// Sparse output count before the dense-to-sparse merger.
    pub count: usize,
    /// Local sparse positions of the block output.
    pub out_pos: Vec<usize>,
}

/// Per-block shapes for the used blocks of a genotype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    /// Indexed by block `1..=N`; `None` for skipped blocks and index 0.
    pub blocks: Vec<Option<BlockPlan>>,
    /// Dense width of every source (index 0 = raw input).
    pub widths: Vec<usize>,
}

impl Plan {
    /// Resolves every block whose `used` flag is set.
    pub fn new(layout: &Layout, g: &Genotype, used: &[bool]) -> Plan {
        let n_blocks = g.num_blocks();
        let mut widths = vec![0; n_blocks + 1];
        let mut positions: Vec<Vec<usize>> = vec![Vec::new(); n_blocks + 1];
        widths[RAW] = layout.num_dense;
        positions[RAW] = (0..layout.num_sparse).collect();
        let mut blocks = vec![None; n_blocks + 1];
        for n in 1..=n_blocks {
            if !used[n] {
                continue;
            }
            let gene = g.block(n);
            let sources: Vec<usize> = gene.connections.iter().copied().collect();
            let dense_rows = sources
                .iter()
                .flat_map(|&s| {
                    let o = layout.dense_offset(s);
                    o..o + widths[s]
                })
                .collect();
            let sparse_pos = sources
                .iter()
                .flat_map(|&s| {
                    let o = layout.sparse_offset(s);
                    positions[s].iter().map(move |p| o + p)
                })
                .collect();
            let width = gene.dense_width();
            let count = gene.sparse_count();
            let mut out_pos: Vec<usize> = (0..count).collect();
            if gene.d2s {
                out_pos.extend(layout.max_n..layout.max_n + D2S_EMBEDDINGS);
            }
            widths[n] = width;
            positions[n] = out_pos.clone();
            blocks[n] = Some(BlockPlan {
                block: n,
                x1: sources[0],
                x2: *sources.last().expect("nonempty connections"),
                sources,
                dense_rows,
                sparse_pos,
                width,
                count,
                out_pos,
            });
        }
        Plan { blocks, widths }
    }

    pub fn block(&self, n: usize) -> Option<&BlockPlan> {
        self.blocks.get(n).and_then(Option::as_ref)
    }

    /// Operator shapes of every used block plus the head, in evaluation
    /// order.
    pub fn op_specs(&self, layout: &Layout, g: &Genotype) -> Vec<(usize, OpSpec)> {
        let ds = layout.dim_s;
        let mut out = Vec::new();
        for bp in self.blocks.iter().flatten() {
            let gene = g.block(bp.block);
            let (din, nin) = (bp.dense_rows.len(), bp.sparse_pos.len());
            let (w1, w2) = (self.widths[bp.x1], self.widths[bp.x2]);
            for (&op, c) in &gene.dense {
                let spec = match op {
                    DenseOp::Fc => OpSpec::fc(din, c.dim),
                    DenseOp::SigmoidGating | DenseOp::Sum => OpSpec {
                        dim_in: w1,
                        dim_in2: w2,
                        out_dim: c.dim,
                        ..OpSpec::new(if op == DenseOp::Sum { OpKind::Sum } else { OpKind::Sg })
                    },
                    DenseOp::DotProduct => OpSpec::dp(din, nin, c.dim, ds, layout.balanced),
                };
                out.push((bp.block, spec));
            }
            for (&op, c) in &gene.sparse {
                let spec = match op {
                    SparseOp::Efc => OpSpec::efc(nin, c.dim, ds),
                    SparseOp::Attention => OpSpec {
                        n_in: nin,
                        out_dim: c.dim,
                        dim_s: ds,
                        heads: layout.heads,
                        ..OpSpec::new(OpKind::Attn)
                    },
                };
                out.push((bp.block, spec));
            }
            if gene.s2d {
                out.push((
                    bp.block,
                    OpSpec {
                        n_in: bp.count,
                        out_dim: bp.width,
                        dim_s: ds,
                        ..OpSpec::new(OpKind::S2d)
                    },
                ));
            }
            if gene.d2s {
                out.push((bp.block, ops::d2s_spec(bp.width, ds)));
            }
        }
        let last = g.num_blocks();
        out.push((
            last + 1,
            OpSpec {
                dim_in: self.widths[last],
                out_dim: 1,
                ..OpSpec::new(OpKind::Head)
            },
        ));
        out
    }
}
