use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{axpy, dot, masked_softmax_row, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, dim]`, keys and values `[batch * k_len, dim]`,
/// heads split `dim` into contiguous slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub causal: bool,
    /// `batch * k_len` flags (`k_len` when `shared_kv`); `false` keys are
    /// never attended to.
    pub key_mask: Option<Vec<bool>>,
    /// Keys and values are a single `[k_len, dim]` memory read by every
    /// batch entry.
    pub shared_kv: bool,
}

impl AttentionSpec {
    #[inline]
    fn kv_batch(&self, b: usize) -> usize {
        if self.shared_kv {
            0
        } else {
            b
        }
    }

    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        (!self.causal || j <= i)
            && self
                .key_mask
                .as_ref()
                .map_or(true, |m| m[self.kv_batch(b) * self.k_len + j])
    }
}

const MASK_FILL: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    MaskFill(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::MaskFill(a, _)
            | Op::Gelu(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of executed ops.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Accumulated gradients, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded at or after position `len`. Vars pointing
    /// past the new end become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The node at tape position `index`, if recorded.
    pub fn var(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input nodes of `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[.., n, k] x [k, m] -> [.., n, m]`; leading axes of `a` act as batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, m) = (sb[0], sb[1]);
        let n = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = m;
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b)))
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = Tensor::from_fn(self.shape(a), |i| self.value(a).data()[i] * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = self.value(a).cols();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            masked_softmax_row(row, |_| true);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Replaces entries whose `keep` flag is false with a large negative value.
    pub fn mask_fill(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(a).numel() {
            return Err(Error::shape("mask_fill", self.shape(a), &[keep.len()]));
        }
        let fill = T::of(MASK_FILL);
        let mut out = self.value(a).clone();
        for (x, &k) in out.data_mut().iter_mut().zip(&keep) {
            if !k {
                *x = fill;
            }
        }
        Ok(self.push(out, Op::MaskFill(a, keep)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::of(LN_EPS);
        let n = T::from_usize(cols);
        let rows = self.value(x).rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = self.value(x).row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let out = Tensor::from_fn(self.shape(a), |i| {
            let x = self.value(a).data()[i];
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        });
        self.push(out, Op::Gelu(a))
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("gather", shape, &[ids.len()]));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::invalid(alloc::format!(
                "gather: id {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(t.row(id as usize));
        }
        Ok(self.push(
            Tensor::new(&[ids.len(), dim], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`; rows with no
    /// target contribute nothing and receive no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>], weights: &[T]) -> Result<Var> {
        let (rows, cols) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len(), weights.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            let Some(target) = targets[r] else { continue };
            if target as usize >= cols {
                return Err(Error::invalid(alloc::format!("cross_entropy: target {target} >= {cols}")));
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            loss += weights[r] * (lse - row[target as usize]);
            masked_softmax_row(row, |_| true);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let out = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel());
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Fused scaled-dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let dim = self.value(q).cols();
        let AttentionSpec {
            batch,
            heads,
            q_len,
            k_len,
            causal,
            ..
        } = spec;
        let kv_rows = if spec.shared_kv { k_len } else { batch * k_len };
        let q_ok = self.shape(q) == [batch * q_len, dim];
        let kv_ok = self.shape(k) == [kv_rows, dim] && self.shape(v) == [kv_rows, dim];
        if !q_ok || !kv_ok {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(alloc::format!("attention: {heads} heads do not divide dim {dim}")));
        }
        if causal && q_len != k_len {
            return Err(Error::shape("attention(causal)", &[q_len], &[k_len]));
        }
        if let Some(m) = spec.key_mask.as_ref().filter(|m| m.len() != kv_rows) {
            return Err(Error::shape("attention(key_mask)", &[kv_rows], &[m.len()]));
        }
        let dh = dim / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); batch * q_len * dim];
        for b in 0..batch {
            let kb = spec.kv_batch(b);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * dim + off..][..dh];
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        if spec.allowed(b, i, j) {
                            *pj = scale * dot(qrow, &kd[(kb * k_len + j) * dim + off..][..dh]);
                        }
                    }
                    masked_softmax_row(p, |j| spec.allowed(b, i, j));
                    let orow = &mut out[(b * q_len + i) * dim + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != T::zero() {
                            axpy(pj, &vd[(kb * k_len + j) * dim + off..][..dh], orow);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[batch * q_len, dim], out)?,
            Op::Attention { q, k, v, spec, probs },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node, visiting
    /// nodes in reverse insertion order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let order: Vec<Var> = (0..=loss.0).rev().map(Var).collect();
        self.backward_in_order(loss, &order)
    }

    /// Like [`Graph::backward`] with an explicit visiting order, which must
    /// list every node up to `loss` exactly once, each before its inputs.
    pub fn backward_in_order(&self, loss: Var, order: &[Var]) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let n = loss.0 + 1;
        let mut pos = vec![usize::MAX; n];
        for (p, v) in order.iter().enumerate() {
            if v.0 >= n || pos[v.0] != usize::MAX {
                return Err(Error::invalid("backward order repeats or exceeds the tape"));
            }
            pos[v.0] = p;
        }
        if pos.iter().any(|&p| p == usize::MAX) {
            return Err(Error::invalid("backward order misses a node"));
        }
        for v in order {
            if self.inputs(*v).iter().any(|i| pos[i.0] < pos[v.0]) {
                return Err(Error::invalid("backward order visits an input before its consumer"));
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for v in order {
            let node = &self.nodes[v.0];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[v.0].take() else { continue };
            self.backprop(*v, &gout, &mut grads);
            grads[v.0] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, at: Var, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[at.0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (k, m) = (self.shape(*b)[0], self.shape(*b)[1]);
                let nrows = self.value(*a).numel() / k;
                if self.wants(*a) {
                    let da = acc(grads, *a, nrows * k);
                    matmul_a_bt_acc(gout, self.value(*b).data(), da, nrows, k, m);
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, k * m);
                    matmul_at_b_acc(self.value(*a).data(), gout, db, nrows, k, m);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.wants(x) {
                        axpy(T::one(), gout, acc(grads, x, gout.len()));
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    axpy(T::one(), gout, acc(grads, *a, gout.len()));
                }
                if self.wants(*bias) {
                    let cols = self.value(*bias).numel();
                    let db = acc(grads, *bias, cols);
                    for row in gout.chunks(cols) {
                        axpy(T::one(), row, db);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(x) {
                        let o = self.value(other).data();
                        let dx = acc(grads, x, gout.len());
                        for i in 0..gout.len() {
                            dx[i] += gout[i] * o[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    axpy(*c, gout, acc(grads, *a, gout.len()));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let dx = acc(grads, *a, gout.len());
                    softmax_backward(y, gout, dx, cols);
                }
            }
            Op::MaskFill(a, keep) => {
                if self.wants(*a) {
                    let dx = acc(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        if keep[i] {
                            dx[i] += gout[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gain).numel();
                let g = self.value(*gain).data();
                if self.wants(*gain) {
                    let dg = acc(grads, *gain, cols);
                    for (gr, hr) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = acc(grads, *bias, cols);
                    for gr in gout.chunks(cols) {
                        axpy(T::one(), gr, db);
                    }
                }
                if self.wants(*x) {
                    let n = T::from_usize(cols);
                    let dx = acc(grads, *x, gout.len());
                    let mut dh = vec![T::zero(); cols];
                    for (r, (gr, hr)) in gout.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            dh[c] = gr[c] * g[c];
                            s1 += dh[c];
                            s2 += dh[c] * hr[c];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        let dxr = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxr[c] += rstd[r] * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xs = self.value(*a).data();
                    let dx = acc(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        let x = xs[i];
                        let th = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + th)
                            + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        dx[i] += gout[i] * d;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let dim = self.value(*table).cols();
                    let len = self.value(*table).numel();
                    let dt = acc(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        axpy(T::one(), &gout[r * dim..(r + 1) * dim], &mut dt[id * dim..(id + 1) * dim]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let cols = self.value(*logits).cols();
                    let dx = acc(grads, *logits, probs.len());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = target else { continue };
                        let w = weights[r] * gout[0];
                        let row = &mut dx[r * cols..(r + 1) * cols];
                        axpy(w, &probs[r * cols..(r + 1) * cols], row);
                        row[*t as usize] -= w;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    axpy(T::one(), gout, acc(grads, *a, gout.len()));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dx = acc(grads, *a, gout.len());
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    acc(grads, *a, n).iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    let g = gout[0] / T::from_usize(n);
                    acc(grads, *a, n).iter_mut().for_each(|d| *d += g);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, gout, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let dim = self.value(q).cols();
        let AttentionSpec {
            batch,
            heads,
            q_len,
            k_len,
            ..
        } = *spec;
        let dh = dim / heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); k_len];
        for b in 0..batch {
            let kb = spec.kv_batch(b);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qi = (b * q_len + i) * dim + off;
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &gout[qi..qi + dh];
                    let mut s = T::zero();
                    for j in 0..k_len {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let kj = (kb * k_len + j) * dim + off;
                        dp[j] = dot(go, &vd[kj..kj + dh]);
                        s += p[j] * dp[j];
                        axpy(p[j], go, &mut dv[kj..kj + dh]);
                    }
                    for j in 0..k_len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = (kb * k_len + j) * dim + off;
                        axpy(ds, &kd[kj..kj + dh], &mut dq[qi..qi + dh]);
                        axpy(ds, &qd[qi..qi + dh], &mut dk[kj..kj + dh]);
                    }
                }
            }
        }
        for (x, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(x) {
                axpy(T::one(), &d, acc(grads, x, d.len()));
            }
        }
    }
}

fn softmax_backward<T: Scalar>(y: &[T], gout: &[T], dx: &mut [T], cols: usize) {
    for ((yr, gr), dr) in y.chunks(cols).zip(gout.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let s = dot(yr, gr);
        for c in 0..cols {
            dr[c] += yr[c] * (gr[c] - s);
        }
    }
}
