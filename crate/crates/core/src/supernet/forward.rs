use super::layout::{BlockPlan, Layout, Plan};
use super::params::{Binder, Init};
use crate::data::FeatureBatch;
use crate::ops::{self, balance_width, AttnWeights, DpWeights, Linear, Norm, D2S_EMBEDDINGS};
use crate::space::{DenseOp, Genotype, SparseOp, RAW};
use crate::tensor::{Result, Rows, Tape, TensorError, Var};

/// Output tensors of one block (or of the raw input).
#[derive(Debug, Clone, Copy)]
pub struct BlockOut {
    /// `[B×width]`.
    pub dense: Var,
    /// `[B×count×dim_s]`, merger embeddings last.
    pub sparse: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[B]` raw logits.
    pub logits: Var,
    /// Index 0 is the raw input, `n` block `n`; skipped blocks are `None`.
    pub outputs: Vec<Option<BlockOut>>,
}

fn lin<'a, B: Binder<'a>>(t: &mut Tape<'a>, b: &mut B, key: &str, rows: Rows, cols: usize) -> Result<Linear> {
    Ok(Linear {
        w: b.weight(t, &format!("{key}.w"), rows, cols)?,
        b: Some(b.vector(t, &format!("{key}.b"), cols, Init::Zeros)?),
    })
}

fn norm<'a, B: Binder<'a>>(t: &mut Tape<'a>, b: &mut B, key: &str, len: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: b.vector(t, &format!("{key}.g"), len, Init::Ones)?,
        beta: b.vector(t, &format!("{key}.b"), len, Init::Zeros)?,
    })
}

fn cat(t: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        t.concat(1, parts)
    }
}

/// Zero-pads every part along axis 1 to `len` and adds them up.
fn sum_padded(t: &mut Tape<'_>, parts: &[Var], len: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in parts {
        let p = t.pad(p, 1, len)?;
        acc = Some(match acc {
            Some(a) => t.add(a, p)?,
            None => p,
        });
    }
    acc.ok_or_else(|| TensorError::Invalid("empty operator branch".into()))
}

/// Raw dense features and embedded sparse fields.
fn raw_input<'a, B: Binder<'a>>(t: &mut Tape<'a>, b: &mut B, layout: &Layout, batch: &FeatureBatch) -> Result<BlockOut> {
    let bs = batch.len();
    let f = layout.num_sparse;
    if batch.dense.shape() != [bs, layout.num_dense] || batch.ids.len() != bs * f {
        return Err(TensorError::Shape {
            op: "feature batch",
            lhs: batch.dense.shape().to_vec(),
            rhs: vec![bs, layout.num_dense, f],
        });
    }
    let offsets = layout.offsets();
    let mut ids = Vec::with_capacity(batch.ids.len());
    for row in batch.ids.chunks(f.max(1)) {
        for (j, &id) in row.iter().enumerate() {
            if id >= layout.vocab[j] {
                return Err(TensorError::Index {
                    index: id,
                    extent: layout.vocab[j],
                });
            }
            ids.push(offsets[j] + id);
        }
    }
    let dense = t.constant(batch.dense.clone());
    let table = b.table(t, "emb", layout.total_vocab(), layout.dim_s)?;
    let sparse = t.embedding(table, &ids, bs, f)?;
    Ok(BlockOut { dense, sparse })
}

struct BlockCtx<'p> {
    layout: &'p Layout,
    plan: &'p Plan,
    bp: &'p BlockPlan,
    x_d: Var,
    x_s: Var,
}

fn dense_op<'a, B: Binder<'a>>(
    t: &mut Tape<'a>,
    b: &mut B,
    cx: &BlockCtx<'_>,
    outs: &[Option<BlockOut>],
    op: DenseOp,
    d: usize,
) -> Result<Var> {
    let (layout, bp) = (cx.layout, cx.bp);
    let pre = format!("b{}", bp.block);
    let din = bp.dense_rows.len();
    match op {
        DenseOp::Fc => {
            let l = lin(t, b, &format!("{pre}.fc"), Rows::Index(bp.dense_rows.clone()), d)?;
            let n = norm(t, b, &format!("{pre}.fc.ln"), d)?;
            ops::fc(t, cx.x_d, &l, Some(&n))
        }
        DenseOp::SigmoidGating | DenseOp::Sum => {
            let x1 = outs[bp.x1].expect("source evaluated").dense;
            let x2 = outs[bp.x2].expect("source evaluated").dense;
            let (w1, w2) = (cx.plan.widths[bp.x1], cx.plan.widths[bp.x2]);
            let m = w1.max(w2);
            let name = if op == DenseOp::Sum { "sum" } else { "sg" };
            let n = if m > 0 {
                Some(norm(t, b, &format!("{pre}.{name}.ln"), m)?)
            } else {
                None
            };
            let y = if op == DenseOp::Sum {
                ops::sum_merge(t, x1, x2, n.as_ref())?
            } else {
                let o = layout.dense_offset(bp.x1);
                let gate = lin(t, b, &format!("{pre}.sg"), Rows::Index((o..o + w1).collect()), m)?;
                ops::sigmoid_gating(t, x1, x2, &gate, n.as_ref())?
            };
            t.fit(y, 1, d)
        }
        DenseOp::DotProduct => {
            let dense_proj = if din > 0 {
                Some(lin(t, b, &format!("{pre}.dp.proj"), Rows::Index(bp.dense_rows.clone()), layout.dim_s)?)
            } else {
                None
            };
            let mut slots_used = Vec::new();
            if din > 0 {
                slots_used.push(0);
            }
            let balance = if layout.balanced {
                let mb = balance_width(d);
                slots_used.extend(1..=mb);
                Some(b.weight(t, &format!("{pre}.dp.bal.w"), Rows::Index(bp.sparse_pos.clone()), mb)?)
            } else {
                slots_used.extend(bp.sparse_pos.iter().map(|p| 1 + p));
                None
            };
            let slots = layout.dp_slots(bp.block);
            let mut pair_rows = Vec::with_capacity(slots_used.len() * slots_used.len() / 2);
            for (i, &gi) in slots_used.iter().enumerate() {
                for &gj in &slots_used[i + 1..] {
                    pair_rows.push(Layout::pair_index(slots, gi, gj));
                }
            }
            let out = lin(t, b, &format!("{pre}.dp.out"), Rows::Index(pair_rows), d)?;
            let n = norm(t, b, &format!("{pre}.dp.ln"), d)?;
            let w = DpWeights {
                dense_proj,
                balance,
                out,
            };
            ops::dot_product(t, (din > 0).then_some(cx.x_d), Some(cx.x_s), &w, Some(&n))
        }
    }
}

fn sparse_op<'a, B: Binder<'a>>(t: &mut Tape<'a>, b: &mut B, cx: &BlockCtx<'_>, op: SparseOp, c: usize) -> Result<Var> {
    let (layout, bp) = (cx.layout, cx.bp);
    let ds = layout.dim_s;
    let pre = format!("b{}", bp.block);
    match op {
        SparseOp::Efc => {
            let l = lin(t, b, &format!("{pre}.efc"), Rows::Index(bp.sparse_pos.clone()), c)?;
            let n = norm(t, b, &format!("{pre}.efc.ln"), ds)?;
            ops::efc(t, cx.x_s, &l, Some(&n))
        }
        SparseOp::Attention => {
            let p = format!("{pre}.attn");
            let w = AttnWeights {
                q: lin(t, b, &format!("{p}.q"), Rows::Prefix(ds), ds)?,
                k: lin(t, b, &format!("{p}.k"), Rows::Prefix(ds), ds)?,
                v: lin(t, b, &format!("{p}.v"), Rows::Prefix(ds), ds)?,
                o: lin(t, b, &format!("{p}.o"), Rows::Prefix(ds), ds)?,
                ff1: lin(t, b, &format!("{p}.ff1"), Rows::Prefix(ds), 2 * ds)?,
                ff2: lin(t, b, &format!("{p}.ff2"), Rows::Prefix(2 * ds), ds)?,
                ln1: norm(t, b, &format!("{p}.ln1"), ds)?,
                ln2: norm(t, b, &format!("{p}.ln2"), ds)?,
            };
            let y = ops::attention(t, cx.x_s, &w, layout.heads)?;
            t.fit(y, 1, c)
        }
    }
}

/// Evaluates the used blocks of `g` and the head. Parameters come from the
/// binder; `reverse_ops` evaluates the operators of each branch in reverse
/// order (the sum is order-independent up to rounding).
pub(crate) fn forward_impl<'a, B: Binder<'a>>(
    t: &mut Tape<'a>,
    b: &mut B,
    layout: &Layout,
    g: &Genotype,
    plan: &Plan,
    batch: &FeatureBatch,
    reverse_ops: bool,
) -> Result<ForwardOut> {
    let n_blocks = g.num_blocks();
    let mut outs: Vec<Option<BlockOut>> = vec![None; n_blocks + 1];
    outs[RAW] = Some(raw_input(t, b, layout, batch)?);
    for n in 1..=n_blocks {
        let Some(bp) = plan.block(n) else { continue };
        let gene = g.block(n);
        let dparts: Vec<Var> = bp.sources.iter().map(|&s| outs[s].expect("source evaluated").dense).collect();
        let sparts: Vec<Var> = bp.sources.iter().map(|&s| outs[s].expect("source evaluated").sparse).collect();
        let cx = BlockCtx {
            layout,
            plan,
            bp,
            x_d: cat(t, &dparts)?,
            x_s: cat(t, &sparts)?,
        };

        let mut dense_ops: Vec<_> = gene.dense.iter().map(|(&op, c)| (op, c.dim)).collect();
        let mut sparse_ops: Vec<_> = gene.sparse.iter().map(|(&op, c)| (op, c.dim)).collect();
        if reverse_ops {
            dense_ops.reverse();
            sparse_ops.reverse();
        }
        let mut ys = Vec::with_capacity(dense_ops.len());
        for (op, d) in dense_ops {
            ys.push(dense_op(t, b, &cx, &outs, op, d)?);
        }
        let mut dense = sum_padded(t, &ys, bp.width)?;
        let mut zs = Vec::with_capacity(sparse_ops.len());
        for (op, c) in sparse_ops {
            zs.push(sparse_op(t, b, &cx, op, c)?);
        }
        let mut sparse = sum_padded(t, &zs, bp.count)?;

        // Mergers read the pre-merge branch outputs.
        let (dense_pre, sparse_pre) = (dense, sparse);
        let ds = layout.dim_s;
        if gene.s2d {
            let l = lin(t, b, &format!("b{n}.s2d"), Rows::Prefix(ds), bp.width)?;
            let ln = norm(t, b, &format!("b{n}.s2d.ln"), bp.width)?;
            let v = ops::sparse_to_dense(t, sparse_pre, &l, Some(&ln))?;
            dense = t.add(dense, v)?;
        }
        if gene.d2s {
            let l = lin(t, b, &format!("b{n}.d2s"), Rows::Prefix(bp.width), D2S_EMBEDDINGS * ds)?;
            let e = ops::dense_to_sparse(t, dense_pre, &l, D2S_EMBEDDINGS)?;
            sparse = t.concat(1, &[sparse, e])?;
        }
        outs[n] = Some(BlockOut { dense, sparse });
    }
    let last = outs[n_blocks].ok_or_else(|| TensorError::Invalid("last block was skipped".into()))?;
    let w = plan.widths[n_blocks];
    let head = lin(t, b, "head", Rows::Prefix(w), 1)?;
    let y = ops::linear(t, last.dense, &head)?;
    let logits = t.reshape(y, &[batch.len()])?;
    Ok(ForwardOut { logits, outputs: outs })
}
