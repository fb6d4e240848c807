use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row selection for [`Tape::gather`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rows {
    /// Rows `0..n`.
    Prefix(usize),
    Index(Vec<usize>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::Prefix(n) => *n,
            Rows::Index(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Rows::Prefix(n) => Box::new(0..*n),
            Rows::Index(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn is_identity_for(&self, extent: usize) -> bool {
        match self {
            Rows::Prefix(n) => *n == extent,
            Rows::Index(v) => v.len() == extent && v.iter().enumerate().all(|(i, &r)| i == r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    Sigmoid,
    Add,
    Mul,
    Sub,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    AddBias(Var, Var),
    Concat { axis: usize, parts: Vec<Var> },
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize },
    Gather { x: Var, rows: Rows, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Softmax(Var),
    SumMiddle(Var),
    PairwiseDots(Var),
    DimMask { x: Var, axis: usize, keep: usize },
    Sum(Var),
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Leaves may borrow parameter tensors for the lifetime `'a`, so concurrent
/// tapes can share read-only weights without copying them.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    flops: u64,
}

/// Gradients produced by [`Tape::backward`].
///
/// Embedding tables receive row-sparse gradients; every other node that
/// requires a gradient gets a dense buffer of its own shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    dense: Vec<Option<Vec<f64>>>,
    sparse: BTreeMap<usize, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    /// Dense gradient of `v`; zeros when `v` did not influence the loss.
    pub fn dense(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        let mut data = self.dense[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        if let Some(rows) = self.sparse.get(&v.0) {
            let width = shape.last().copied().unwrap_or(1);
            for (&r, g) in rows {
                for (d, x) in data[r * width..(r + 1) * width].iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
        Tensor {
            shape: shape.clone(),
            data,
        }
    }

    /// Raw dense buffer, if any gradient reached `v` densely.
    pub fn dense_raw(&self, v: Var) -> Option<&[f64]> {
        self.dense[v.0].as_deref()
    }

    /// Row-sparse gradient accumulated through embedding lookups.
    pub fn sparse_rows(&self, v: Var) -> Option<&BTreeMap<usize, Vec<f64>>> {
        self.sparse.get(&v.0)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed so far: 2 per multiply-accumulate of a matrix product,
    /// 5 per output element of sigmoid, softmax and layer-norm.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Adds work performed by a composite operator whose arithmetic the
    /// recorded primitives do not count.
    pub fn count_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(Tensor { shape, data }), op, rg)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// Constant input, no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Borrowed leaf that receives gradients.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed leaf that does not receive gradients.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        Ok(self.push_owned(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batched_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::matmul_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.flops += 2 * (bs * m * k * n) as u64;
        Ok(self.push_owned(vec![bs, m, n], out, Op::BatchedMatMul(a, b), &[a, b]))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Relu, _) => Ok(self.relu(a)),
            (ElementwiseOp::Sigmoid, _) => Ok(self.sigmoid(a)),
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (_, None) => Err(TensorError::Invalid(format!("{op:?} needs two operands"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push_owned(shape, out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push_owned(shape, out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape().to_vec();
        self.flops += 5 * out.len() as u64;
        self.push_owned(shape, out, Op::Sigmoid(a), &[a])
    }

    /// Adds a bias vector along the last axis. The bias is not broadcast
    /// implicitly elsewhere; this is the one explicit broadcasting primitive.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.shape().last().copied().unwrap_or(0);
        if tb.rank() != 1 || tb.len() != n {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push_owned(shape, out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero parts".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_owned(
            shape,
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", &s, &[axis, start, len]));
        }
        if start == 0 && len == s[axis] {
            return Ok(x);
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push_owned(shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Zero-pads `axis` at the end up to extent `len`.
    pub fn pad(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len < s[axis] {
            return Err(shape_err("pad", &s, &[axis, len]));
        }
        if len == s[axis] {
            return Ok(x);
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        let chunk = s[axis] * inner;
        for o in 0..outer {
            out[o * len * inner..o * len * inner + chunk].copy_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push_owned(shape, out, Op::Pad { x, axis }, &[x]))
    }

    /// Truncates or zero-pads `axis` to exactly `len`.
    pub fn fit(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let cur = self.shape(x)[axis];
        if cur >= len {
            self.narrow(x, axis, 0, len)
        } else {
            self.pad(x, axis, len)
        }
    }

    /// Selected rows and leading `cols` columns of a 2-D tensor. Gradients
    /// scatter back into the source.
    pub fn gather(&mut self, x: Var, rows: Rows, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if rows.is_identity_for(t.shape()[0]) && t.rank() == 2 && cols == t.shape()[1] {
            return Ok(x);
        }
        let g = t.gather2d(&rows, cols)?;
        let shape = g.shape().to_vec();
        Ok(self.push_owned(shape, g.into_data(), Op::Gather { x, rows, cols }, &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.shape().last().copied().unwrap_or(0);
        if n == 0 {
            return Err(TensorError::Invalid("layer_norm over an empty axis".into()));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / n;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.flops += 5 * out.len() as u64;
        Ok(self.push_owned(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of `table` [V×d] for an id matrix [B×F] → [B×F×d].
    /// The table must be a leaf.
    pub fn embedding(&mut self, table: Var, ids: &[usize], batch: usize, fields: usize) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.len() != batch * fields {
            return Err(shape_err("embedding", t.shape(), &[batch, fields]));
        }
        if !matches!(self.nodes[table.0].op, Op::Leaf) {
            return Err(TensorError::Invalid("embedding table must be a leaf".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, extent: v });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push_owned(
            vec![batch, fields, d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        if t.shape() == shape {
            return Ok(x);
        }
        let data = t.data().to_vec();
        Ok(self.push_owned(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", t.shape(), perm));
        }
        let (data, shape) = kernels::permute(t.data(), t.shape(), perm);
        Ok(self.push_owned(
            shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape().last().copied().unwrap_or(1).max(1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.flops += 5 * out.len() as u64;
        self.push_owned(shape, out, Op::Softmax(x), &[x])
    }

    /// [B×N×d] → [B×d], summing over N.
    pub fn sum_middle(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(shape_err("sum_middle", t.shape(), &[]));
        }
        let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..n {
                let src = &t.data()[(i * n + j) * d..(i * n + j + 1) * d];
                for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        Ok(self.push_owned(vec![b, d], out, Op::SumMiddle(x), &[x]))
    }

    /// Strict upper triangle of the per-sample Gram matrix:
    /// [B×n×d] → [B×n(n−1)/2], pairs `(i, j)` with `i < j` in row-major order.
    pub fn pairwise_dots(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(shape_err("pairwise_dots", t.shape(), &[]));
        }
        let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let pairs = n * n.saturating_sub(1) / 2;
        let mut out = Vec::with_capacity(b * pairs);
        for s in 0..b {
            let base = &t.data()[s * n * d..(s + 1) * n * d];
            for i in 0..n {
                for j in i + 1..n {
                    out.push(kernels::dot(&base[i * d..(i + 1) * d], &base[j * d..(j + 1) * d]));
                }
            }
        }
        self.flops += 2 * (b * pairs * d) as u64;
        Ok(self.push_owned(vec![b, pairs], out, Op::PairwiseDots(x), &[x]))
    }

    /// Zeros every index `>= keep` along `axis`.
    pub fn dim_mask(&mut self, x: Var, axis: usize, keep: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || keep > s[axis] {
            return Err(shape_err("dim_mask", &s, &[axis, keep]));
        }
        let inner: usize = s[axis + 1..].iter().product();
        let ext = s[axis];
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if (i / inner) % ext >= keep {
                *v = 0.0;
            }
        }
        Ok(self.push_owned(s, out, Op::DimMask { x, axis, keep }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_owned(vec![], vec![s], Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy of raw logits against {0,1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != labels.len() {
            return Err(shape_err("bce_with_logits", t.shape(), &[labels.len()]));
        }
        let n = labels.len().max(1) as f64;
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push_owned(
            vec![],
            vec![loss],
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalar(lt.shape().to_vec()));
        }
        let mut acc = Accum {
            nodes: &self.nodes,
            dense: vec![None; self.nodes.len()],
            sparse: BTreeMap::new(),
        };
        acc.dense[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc.dense[i].take() else {
                continue;
            };
            acc.propagate(i, &g);
            acc.dense[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            dense: acc.dense,
            sparse: acc.sparse,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Accum<'t, 'a> {
    nodes: &'t [Node<'a>],
    dense: Vec<Option<Vec<f64>>>,
    sparse: BTreeMap<usize, BTreeMap<usize, Vec<f64>>>,
}

impl Accum<'_, '_> {
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.dense[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_to(&mut self, v: Var, g: impl Iterator<Item = f64>) {
        if let Some(s) = self.slot(v) {
            for (d, x) in s.iter_mut().zip(g) {
                *d += x;
            }
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(s) = self.slot(*a) {
                    kernels::matmul_a_bt_acc(g, tb.data(), s, m, k, n);
                }
                if let Some(s) = self.slot(*b) {
                    kernels::matmul_at_b_acc(ta.data(), g, s, m, k, n);
                }
            }
            Op::BatchedMatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if let Some(s) = self.slot(*a) {
                    for j in 0..bs {
                        kernels::matmul_a_bt_acc(
                            &g[j * m * n..(j + 1) * m * n],
                            &tb.data()[j * k * n..(j + 1) * k * n],
                            &mut s[j * m * k..(j + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(s) = self.slot(*b) {
                    for j in 0..bs {
                        kernels::matmul_at_b_acc(
                            &ta.data()[j * m * k..(j + 1) * m * k],
                            &g[j * m * n..(j + 1) * m * n],
                            &mut s[j * k * n..(j + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_to(*a, g.iter().copied());
                self.add_to(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_to(*a, g.iter().copied());
                self.add_to(*b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                if a == b {
                    let gg: Vec<f64> = g.iter().zip(ta).map(|(x, y)| 2.0 * x * y).collect();
                    self.add_to(*a, gg.into_iter());
                } else {
                    let ga: Vec<f64> = g.iter().zip(tb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(ta).map(|(x, y)| x * y).collect();
                    self.add_to(*a, ga.into_iter());
                    self.add_to(*b, gb.into_iter());
                }
            }
            Op::Scale(a, c) => self.add_to(*a, g.iter().map(|x| x * c)),
            Op::Relu(a) => {
                let ta = self.val(*a).data();
                let gg: Vec<f64> = g.iter().zip(ta).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                self.add_to(*a, gg.into_iter());
            }
            Op::Sigmoid(a) => {
                let gg: Vec<f64> = g.iter().zip(out.data()).map(|(x, &s)| x * s * (1.0 - s)).collect();
                self.add_to(*a, gg.into_iter());
            }
            Op::AddBias(x, b) => {
                self.add_to(*x, g.iter().copied());
                let n = self.val(*b).len();
                if n > 0 {
                    if let Some(s) = self.slot(*b) {
                        for row in g.chunks(n) {
                            for (d, v) in s.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Concat { axis, parts } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.val(p).shape()[*axis] * inner;
                    if let Some(s) = self.slot(p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, v) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.val(*x).shape().to_vec();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                if let Some(s) = self.slot(*x) {
                    for o in 0..outer {
                        let dst = o * src_shape[*axis] * inner + start * inner;
                        for (d, v) in s[dst..dst + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Pad { x, axis } => {
                let src_shape = self.val(*x).shape().to_vec();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let chunk = src_shape[*axis] * inner;
                if let Some(s) = self.slot(*x) {
                    for o in 0..outer {
                        for (d, v) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[o * len * inner..]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Gather { x, rows, cols } => {
                let width = self.val(*x).shape()[1];
                let cols = *cols;
                if let Some(s) = self.slot(*x) {
                    for (i, r) in rows.iter().enumerate() {
                        for (d, v) in s[r * width..r * width + cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.shape().last().copied().unwrap_or(1);
                let gam = self.val(*gamma).data().to_vec();
                if let Some(s) = self.slot(*gamma) {
                    for (r, row) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            s[j] += row[j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(s) = self.slot(*beta) {
                    for row in g.chunks(n) {
                        for (d, v) in s.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if let Some(s) = self.slot(*x) {
                    let nf = n as f64;
                    for (r, row) in g.chunks(n).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = row[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        let is = inv_std[r];
                        for j in 0..n {
                            let dh = row[j] * gam[j];
                            s[r * n + j] += is / nf * (nf * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let d = self.val(*table).shape()[1];
                    let rows = self.sparse.entry(table.0).or_default();
                    for (k, &id) in ids.iter().enumerate() {
                        let r = rows.entry(id).or_insert_with(|| vec![0.0; d]);
                        for (a, v) in r.iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => self.add_to(*x, g.iter().copied()),
            Op::Permute { x, perm } => {
                let (back, _) = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                self.add_to(*x, back.into_iter());
            }
            Op::Softmax(x) => {
                let n = out.shape().last().copied().unwrap_or(1).max(1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dotv = kernels::dot(gr, yr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dotv);
                    }
                }
                self.add_to(*x, gx.into_iter());
            }
            Op::SumMiddle(x) => {
                let s3 = self.val(*x).shape().to_vec();
                let (b, n, d) = (s3[0], s3[1], s3[2]);
                if let Some(s) = self.slot(*x) {
                    for i in 0..b {
                        for j in 0..n {
                            for (t, v) in s[(i * n + j) * d..(i * n + j + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *t += v;
                            }
                        }
                    }
                }
            }
            Op::PairwiseDots(x) => {
                let tx = self.val(*x);
                let (b, n, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let xd = tx.data().to_vec();
                let pairs = n * n.saturating_sub(1) / 2;
                if let Some(s) = self.slot(*x) {
                    for smp in 0..b {
                        let base = smp * n * d;
                        let mut p = smp * pairs;
                        for i in 0..n {
                            for j in i + 1..n {
                                let gv = g[p];
                                p += 1;
                                if gv == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    s[base + i * d + t] += gv * xd[base + j * d + t];
                                    s[base + j * d + t] += gv * xd[base + i * d + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::DimMask { x, axis, keep } => {
                let shape = out.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[*axis];
                let keep = *keep;
                self.add_to(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(move |(i, &v)| if (i / inner) % ext < keep { v } else { 0.0 }),
                );
            }
            Op::Sum(x) => {
                let gv = g[0];
                let n = self.val(*x).len();
                self.add_to(*x, std::iter::repeat_n(gv, n));
            }
            Op::BceWithLogits { logits, labels } => {
                let n = labels.len().max(1) as f64;
                let gv = g[0];
                let z = self.val(*logits).data().to_vec();
                self.add_to(
                    *logits,
                    z.into_iter().zip(labels).map(move |(z, &y)| gv * (sigmoid(z) - y) / n),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0]]));
        let b = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batched_matmul_degenerate_and_identity() {
        let mut tape = Tape::new();
        let m = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let mm = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = tape.constant(m.clone());
        let c = tape.batched_matmul(a, a).unwrap();
        let a2 = tape.constant(m.clone().reshape(&[2, 2]).unwrap());
        let c2 = tape.matmul(a2, a2).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(c2).data());
        let e = tape.constant(eye);
        let b = tape.constant(mm.clone());
        let r = tape.batched_matmul(e, b).unwrap();
        assert_eq!(tape.value(r).data(), mm.data());
        let bad = tape.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(tape.batched_matmul(e, bad).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.elementwise(ElementwiseOp::Relu, a, None).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::from_vec(vec![0.0]));
        let s = tape.elementwise(ElementwiseOp::Sigmoid, z, None).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let m = tape.elementwise(ElementwiseOp::Mul, x, Some(y)).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 8.0]);
        assert!(tape.elementwise(ElementwiseOp::Add, x, Some(a)).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0]]));
        let b = tape.constant(t2(&[vec![9.0]]));
        let c = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0]);
        let wide = tape.constant(Tensor::zeros(&[4, 3]));
        let empty = tape.constant(Tensor::zeros(&[4, 0]));
        let c = tape.concat(1, &[wide, empty]).unwrap();
        assert_eq!(tape.shape(c), &[4, 3]);
        let other = tape.constant(Tensor::zeros(&[5, 3]));
        assert!(tape.concat(1, &[wide, other]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t2(&[vec![1.0, 3.0], vec![4.0, 4.0]]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
        assert_eq!(&d[2..], &[0.0, 0.0]);
        let beta = tape.constant(Tensor::from_vec(vec![0.7, 0.7]));
        let y = tape.layer_norm(x, g, beta, 1e-5).unwrap();
        let mean = tape.value(y).data()[..2].iter().sum::<f64>() / 2.0;
        assert!((mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn embedding_examples() {
        let mut tape = Tape::new();
        let table = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]));
        let e = tape.embedding(table, &[2, 1], 1, 2).unwrap();
        assert_eq!(tape.shape(e), &[1, 2, 2]);
        assert_eq!(tape.value(e).data(), &[1.0, 1.0, 0.0, 1.0]);
        let z = tape.embedding(table, &[0, 0, 0], 3, 1).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            tape.embedding(table, &[3], 1, 1),
            Err(TensorError::Index { index: 3, extent: 3 })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let w = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.dense(v).data(), &[1.0; 4]);
    }

    #[test]
    fn backward_sigmoid_chain() {
        let w = Tensor::from_vec(vec![0.0]);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let x = tape.constant(Tensor::from_vec(vec![2.0]));
        let s = tape.sigmoid(v);
        let p = tape.mul(s, x).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!((g.dense(v).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_has_zero_gradient_and_non_scalar_fails() {
        let w = Tensor::from_vec(vec![1.0, 2.0]);
        let u = Tensor::from_vec(vec![3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let unused = tape.param(&u);
        let l = tape.sum(v);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.dense(unused).data(), &[0.0]);
        assert!(matches!(tape.backward(v), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let w = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let xv = tape.constant(x);
        let h = tape.matmul(xv, wv).unwrap();
        let s = tape.sigmoid(h);
        let l = tape.sum(s);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn embedding_gradient_is_row_sparse() {
        let table = Tensor::new(vec![4, 2], vec![0.0; 8]).unwrap();
        let mut tape = Tape::new();
        let t = tape.param(&table);
        let e = tape.embedding(t, &[1, 1, 3], 3, 1).unwrap();
        let l = tape.sum(e);
        let g = tape.backward(l).unwrap();
        let rows = g.sparse_rows(t).unwrap();
        assert_eq!(rows.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(rows[&1], vec![2.0, 2.0]);
        assert_eq!(g.dense(t).data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn pairwise_dots_counts_and_orthogonality() {
        let mut tape = Tape::new();
        let eye = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let x = tape.constant(eye);
        let p = tape.pairwise_dots(x).unwrap();
        assert_eq!(tape.shape(p), &[1, 6]);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_mask_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 3], vec![5.0, 6.0, 7.0]).unwrap());
        let m = tape.dim_mask(v, 1, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 6.0, 0.0]);
        let full = tape.dim_mask(v, 1, 3).unwrap();
        assert_eq!(tape.value(full).data(), tape.value(v).data());
        let none = tape.dim_mask(v, 1, 0).unwrap();
        assert!(tape.value(none).data().iter().all(|&x| x == 0.0));
        assert!(tape.dim_mask(v, 1, 4).is_err());
    }
}
