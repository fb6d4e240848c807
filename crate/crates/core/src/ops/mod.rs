//! Building operators of a choice block, the two branch mergers, dimension
//! masking and closed-form parameter/FLOPs accounting.
//!
//! Operators work on tape variables. Weights arrive already sliced to the
//! sampled dimensions, so the same code serves the weight-sharing supernet
//! and standalone models.

mod cost;

pub use cost::{balance_width, dp_params_paper, flops, mac_flops, param_count, OpKind, OpSpec, ParamCount};
pub(crate) use cost::d2s_spec;

use crate::tensor::{Result, Tape, TensorError, Var};

/// Layer-norm epsilon used by every operator.
pub const LN_EPS: f64 = 1e-5;
/// Embeddings emitted by the dense-to-sparse merger.
pub const D2S_EMBEDDINGS: usize = 2;
/// FLOPs charged per output element of sigmoid, softmax and layer-norm.
pub const NONLINEAR_FLOPS: u64 = 5;

/// `x·W + b` on the last axis of a 2-D input.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

/// Layer-norm affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: Var,
    pub beta: Var,
}

/// Which axis [`dim_mask`] truncates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    /// Last axis of a `[B×d]` dense tensor.
    Dense,
    /// Middle axis of a `[B×N×dim_s]` sparse tensor.
    Sparse,
}

/// Keeps indices `< d` along the masked axis and zeros the rest.
pub fn dim_mask(t: &mut Tape<'_>, v: Var, d: usize, axis: MaskAxis) -> Result<Var> {
    let ax = match axis {
        MaskAxis::Dense => t.shape(v).len().saturating_sub(1),
        MaskAxis::Sparse => 1,
    };
    t.dim_mask(v, ax, d)
}

pub fn linear(t: &mut Tape<'_>, x: Var, l: &Linear) -> Result<Var> {
    let y = t.matmul(x, l.w)?;
    match l.b {
        Some(b) => t.add_bias(y, b),
        None => Ok(y),
    }
}

/// Layer-norm over the last axis; identity without affine params or on an
/// empty axis.
pub fn norm(t: &mut Tape<'_>, x: Var, n: Option<&Norm>) -> Result<Var> {
    match n {
        Some(n) if t.shape(x).last().is_some_and(|&w| w > 0) => t.layer_norm(x, n.gamma, n.beta, LN_EPS),
        _ => Ok(x),
    }
}

/// `norm(relu(x·W + b))`. A width-0 input yields `relu(b)`.
pub fn fc(t: &mut Tape<'_>, x: Var, l: &Linear, n: Option<&Norm>) -> Result<Var> {
    let y = linear(t, x, l)?;
    let y = t.relu(y);
    norm(t, y, n)
}

/// `sigmoid(x1·W + b) ⊙ pad(x2)`; the gate's output width must be
/// `max(d1, d2)` and the narrower input is zero-padded.
pub fn sigmoid_gating(t: &mut Tape<'_>, x1: Var, x2: Var, gate: &Linear, n: Option<&Norm>) -> Result<Var> {
    let m = t.shape(x1)[1].max(t.shape(x2)[1]);
    let g = linear(t, x1, gate)?;
    if t.shape(g)[1] != m {
        return Err(TensorError::Shape {
            op: "sigmoid_gating",
            lhs: t.shape(g).to_vec(),
            rhs: vec![m],
        });
    }
    let g = t.sigmoid(g);
    let x2 = t.pad(x2, 1, m)?;
    let y = t.mul(g, x2)?;
    norm(t, y, n)
}

/// Zero-pads the narrower input and adds.
pub fn sum_merge(t: &mut Tape<'_>, x1: Var, x2: Var, n: Option<&Norm>) -> Result<Var> {
    let m = t.shape(x1)[1].max(t.shape(x2)[1]);
    let a = t.pad(x1, 1, m)?;
    let b = t.pad(x2, 1, m)?;
    let y = t.add(a, b)?;
    norm(t, y, n)
}

/// Linear map along the middle axis: `[B×N×s]·W[N×c] → [B×c×s]`, with an
/// optional bias per output embedding.
pub fn efc_project(t: &mut Tape<'_>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Shape {
            op: "efc",
            lhs: s,
            rhs: t.shape(w).to_vec(),
        });
    }
    let (bs, n, ds) = (s[0], s[1], s[2]);
    let c = t.shape(w)[1];
    let xt = t.permute(x, &[0, 2, 1])?;
    let xt = t.reshape(xt, &[bs * ds, n])?;
    let y = linear(t, xt, &Linear { w, b })?;
    let y = t.reshape(y, &[bs, ds, c])?;
    t.permute(y, &[0, 2, 1])
}

/// Embedded FC: middle-axis projection, relu, layer-norm over `dim_s`.
pub fn efc(t: &mut Tape<'_>, x: Var, l: &Linear, n: Option<&Norm>) -> Result<Var> {
    let y = efc_project(t, x, l.w, l.b)?;
    let y = t.relu(y);
    norm(t, y, n)
}

/// Weights of the dot-product interaction.
#[derive(Debug, Clone, Copy)]
pub struct DpWeights {
    /// Dense input → `dim_s`, required when a dense input is given.
    pub dense_proj: Option<Linear>,
    /// Balancing projection of the sparse input to `round(sqrt(2·d))`
    /// embeddings, bias-free.
    pub balance: Option<Var>,
    /// Flattened interactions → output width.
    pub out: Linear,
}

/// Stacks the projected dense row above the (optionally balanced) sparse
/// embeddings, takes the strict upper triangle of the per-sample Gram
/// matrix and maps it through `norm(relu(FC))`.
pub fn dot_product(
    t: &mut Tape<'_>,
    x_d: Option<Var>,
    x_s: Option<Var>,
    w: &DpWeights,
    n: Option<&Norm>,
) -> Result<Var> {
    let mut rows = Vec::new();
    if let Some(xd) = x_d {
        let proj = w
            .dense_proj
            .as_ref()
            .ok_or_else(|| TensorError::Invalid("dot_product: dense input without projection".into()))?;
        let p = linear(t, xd, proj)?;
        let (bs, ds) = (t.shape(p)[0], t.shape(p)[1]);
        rows.push(t.reshape(p, &[bs, 1, ds])?);
    }
    if let Some(xs) = x_s {
        let s = match w.balance {
            Some(bw) => efc_project(t, xs, bw, None)?,
            None => xs,
        };
        rows.push(s);
    }
    if rows.is_empty() {
        return Err(TensorError::Invalid("dot_product: both inputs absent".into()));
    }
    let stacked = if rows.len() == 1 { rows[0] } else { t.concat(1, &rows)? };
    let pairs = t.pairwise_dots(stacked)?;
    fc(t, pairs, &w.out, n)
}

/// Weights of one transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: Norm,
    pub ln2: Norm,
}

/// Self-attention encoder layer over the embeddings of `x` `[B×N×dim_s]`.
pub fn attention(t: &mut Tape<'_>, x: Var, w: &AttnWeights, heads: usize) -> Result<Var> {
    attention_with_probs(t, x, w, heads).map(|(y, _)| y)
}

/// As [`attention`], also returning the attention probabilities
/// `[B·H×N×N]`.
pub fn attention_with_probs(t: &mut Tape<'_>, x: Var, w: &AttnWeights, heads: usize) -> Result<(Var, Var)> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(TensorError::Invalid(format!(
            "attention: dim_s {} not divisible by {heads} heads",
            s.get(2).copied().unwrap_or(0)
        )));
    }
    let (bs, n, ds) = (s[0], s[1], s[2]);
    let dh = ds / heads;
    let x2 = t.reshape(x, &[bs * n, ds])?;
    let split = |t: &mut Tape<'_>, l: &Linear, perm: &[usize], shape: &[usize]| -> Result<Var> {
        let y = linear(t, x2, l)?;
        let y = t.reshape(y, &[bs, n, heads, dh])?;
        let y = t.permute(y, perm)?;
        t.reshape(y, shape)
    };
    let q = split(t, &w.q, &[0, 2, 1, 3], &[bs * heads, n, dh])?;
    let kt = split(t, &w.k, &[0, 2, 3, 1], &[bs * heads, dh, n])?;
    let v = split(t, &w.v, &[0, 2, 1, 3], &[bs * heads, n, dh])?;
    let scores = t.batched_matmul(q, kt)?;
    let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = t.softmax(scores);
    let ctx = t.batched_matmul(probs, v)?;
    let ctx = t.reshape(ctx, &[bs, heads, n, dh])?;
    let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = t.reshape(ctx, &[bs * n, ds])?;
    let o = linear(t, ctx, &w.o)?;
    let h = t.add(x2, o)?;
    let h = t.layer_norm(h, w.ln1.gamma, w.ln1.beta, LN_EPS)?;
    let f = linear(t, h, &w.ff1)?;
    let f = t.relu(f);
    let f = linear(t, f, &w.ff2)?;
    let y = t.add(h, f)?;
    let y = t.layer_norm(y, w.ln2.gamma, w.ln2.beta, LN_EPS)?;
    Ok((t.reshape(y, &[bs, n, ds])?, probs))
}

/// FC to `k·dim_s` reshaped into `k` embeddings.
pub fn dense_to_sparse(t: &mut Tape<'_>, x: Var, l: &Linear, k: usize) -> Result<Var> {
    let y = linear(t, x, l)?;
    let (bs, w) = (t.shape(y)[0], t.shape(y)[1]);
    if k == 0 || w % k != 0 {
        return Err(TensorError::Invalid(format!("dense_to_sparse: width {w} not divisible by {k}")));
    }
    t.reshape(y, &[bs, k, w / k])
}

/// Second-order factorization machine vector
/// `0.5·[(Σₙ xₙ)² − Σₙ xₙ²]` per sample, `[B×N×s] → [B×s]`.
pub fn fm(t: &mut Tape<'_>, x: Var) -> Result<Var> {
    let s = t.sum_middle(x)?;
    let s2 = t.mul(s, s)?;
    let sq = t.mul(x, x)?;
    let ssq = t.sum_middle(sq)?;
    let diff = t.sub(s2, ssq)?;
    let n = t.shape(x)[1] * t.shape(x)[2];
    t.count_flops(2 * (n * t.shape(x)[0]) as u64);
    Ok(t.scale(diff, 0.5))
}

/// FM followed by a linear projection to the dense width and a layer norm.
pub fn sparse_to_dense(t: &mut Tape<'_>, x: Var, l: &Linear, n: Option<&Norm>) -> Result<Var> {
    let v = fm(t, x)?;
    let y = linear(t, v, l)?;
    norm(t, y, n)
}

#[cfg(test)]
mod tests;
