//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node; node ids are therefore a topological order
//! and `backward` walks the tape in exact reverse.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use super::real::{gemm, Layout};
use super::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// One block of a packed attention call: query rows `queries` attend key
/// rows `keys`. With `causal`, query `i` sees keys up to `i + keys.len() - queries.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub causal: bool,
}

/// Block-diagonal attention pattern over packed sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionLayout {
    segments: Vec<Segment>,
}

impl AttentionLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single dense block covering all `n_queries x n_keys` pairs.
    pub fn dense(n_queries: usize, n_keys: usize) -> Self {
        let mut layout = Self::new();
        layout.push(0..n_queries, 0..n_keys, false);
        layout
    }

    pub fn push(&mut self, queries: Range<usize>, keys: Range<usize>, causal: bool) {
        self.segments.push(Segment {
            queries,
            keys,
            causal,
        });
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn validate(&self, n_queries: usize, n_keys: usize) -> Result<(), TensorError> {
        let mut covered = vec![false; n_queries];
        for s in &self.segments {
            let bad = s.queries.end > n_queries
                || s.keys.end > n_keys
                || s.keys.is_empty()
                || (s.causal && s.queries.len() > s.keys.len());
            if bad {
                return Err(TensorError::Layout(format!(
                    "segment {:?} invalid for {} queries / {} keys",
                    s, n_queries, n_keys
                )));
            }
            for q in s.queries.clone() {
                if std::mem::replace(&mut covered[q], true) {
                    return Err(TensorError::Layout(format!(
                        "query row {q} appears in two segments"
                    )));
                }
            }
        }
        Ok(())
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Act(NodeId, Activation),
    Softmax(NodeId),
    Lerp {
        from: NodeId,
        to: NodeId,
        weight: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<T>,
        count: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttentionLayout>,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    Dropout(NodeId, Vec<T>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation: values, the ops that produced them, and (after
/// [`Graph::backward`]) their gradients.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(), TensorError> {
    if t.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Rows of a tensor viewed as `[rows x last_dim]`.
fn as_rows<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let cols = *t.shape().last().unwrap();
    (t.numel() / cols, cols)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        self.grads.push(None);
        id
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records `t` as an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records a copy of `t`, tracking gradients iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> NodeId {
        self.leaf(t.clone())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grad(id)
            .map(|g| Tensor::from_vec(self.value(id).shape().to_vec(), g.to_vec()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = va.dims2()?;
        let (k2, m) = vb.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            va.data(),
            (n, k),
            Layout::Normal,
            vb.data(),
            (k, m),
            Layout::Normal,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec([n, m], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec([c, r], out), Op::Transpose(x), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out), op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, cols) = as_rows(vx);
        if vb.numel() != cols {
            return Err(mismatch("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let out: Vec<T> = vx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&a, &c)| a + c))
            .collect();
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a * factor).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if v.data().iter().any(|a| a.is_nan()) {
            return Err(TensorError::NonFinite("activation"));
        }
        let out = match kind {
            Activation::Sigmoid => v.data().iter().map(|&a| sigmoid(a)).collect(),
            Activation::Relu => v.data().iter().map(|&a| a.max(T::zero())).collect(),
        };
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Act(x, kind), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.activation(x, Activation::Relu)
    }

    /// Row-wise softmax over the last dimension with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        check_finite("softmax_rows", v)?;
        let (_, cols) = as_rows(v);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Softmax(x), rg))
    }

    /// `from + weight * (to - from)`, elementwise. For weights in `[0, 1]`
    /// the result is kept inside the closed interval spanned by the inputs.
    pub fn lerp(&mut self, from: NodeId, to: NodeId, weight: NodeId) -> Result<NodeId, TensorError> {
        let (a, b, w) = (self.value(from), self.value(to), self.value(weight));
        if a.shape() != b.shape() {
            return Err(mismatch("lerp", a.shape(), b.shape()));
        }
        if a.shape() != w.shape() {
            return Err(mismatch("lerp", a.shape(), w.shape()));
        }
        let out: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .zip(w.data())
            .map(|((&x, &y), &l)| {
                let v = x + l * (y - x);
                if l >= T::zero() && l <= T::one() {
                    v.max(x.min(y)).min(x.max(y))
                } else {
                    v
                }
            })
            .collect();
        let shape = a.shape().to_vec();
        let rg = self.rg(&[from, to, weight]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::Lerp { from, to, weight },
            rg,
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = as_rows(vx);
        if vg.numel() != d {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        if vb.numel() != d {
            return Err(mismatch("layer_norm", vx.shape(), vb.shape()));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<NodeId, TensorError> {
        let v = self.value(logits);
        let (n, vocab) = v.dims2()?;
        if targets.len() != n {
            return Err(mismatch("cross_entropy", v.shape(), &[targets.len()]));
        }
        check_finite("cross_entropy", v)?;
        let mut probs = v.data().to_vec();
        let mut total = T::zero();
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            softmax_in_place(row);
            if t == ignore_index {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::Index { index: t, bound: vocab });
            }
            let logits_row = &v.data()[i * vocab..(i + 1) * vocab];
            total -= log_softmax_at(logits_row, t);
            count += 1;
        }
        let loss = if count > 0 {
            total / T::of(count as f64)
        } else {
            T::zero()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` (`[V x d]`) by index.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(table);
        let (vocab, d) = v.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index { index: id, bound: vocab });
            }
            out.extend_from_slice(v.row(id));
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, d]));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_vec([ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over packed sequences, split into
    /// `heads` column groups. Scores are scaled by `1/sqrt(d / heads)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = vq.dims2()?;
        let (tk, dk) = vk.dims2()?;
        let (tv, dv) = vv.dims2()?;
        if d != dk {
            return Err(mismatch("attention", vq.shape(), vk.shape()));
        }
        if tk != tv || dv != d {
            return Err(mismatch("attention", vk.shape(), vv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Layout(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        layout.validate(tq, tk)?;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut out = vec![T::zero(); tq * d];
        let total: usize = layout
            .segments()
            .iter()
            .map(|s| s.queries.len() * s.keys.len() * heads)
            .sum();
        let mut probs = vec![T::zero(); total];
        let mut off = 0;
        for s in layout.segments() {
            let (nq, nk) = (s.queries.len(), s.keys.len());
            let shift = nk - nq.min(nk);
            for h in 0..heads {
                let c0 = h * dh;
                let (qs, ks) = (s.queries.start * d + c0, s.keys.start * d + c0);
                let p = &mut probs[off..off + nq * nk];
                // S = scale * Q_h K_h^T
                strided_gemm(
                    (nq, dh, nk),
                    scale,
                    (&qd[qs..], d, 1),
                    (&kd[ks..], 1, d),
                    T::zero(),
                    (p, nk),
                );
                for i in 0..nq {
                    let visible = if s.causal { i + shift + 1 } else { nk };
                    let row = &mut p[i * nk..(i + 1) * nk];
                    softmax_in_place(&mut row[..visible]);
                    row[visible..].iter_mut().for_each(|x| *x = T::zero());
                }
                // O_h = P V_h
                strided_gemm(
                    (nq, nk, dh),
                    T::one(),
                    (p, nk, 1),
                    (&vd[ks..], d, 1),
                    T::zero(),
                    (&mut out[qs..], d),
                );
                off += nq * nk;
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_vec([tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let v = self.value(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::Dropout(x, mask), rg)
    }

    /// Populates gradients of the scalar `loss` w.r.t. all tracked nodes.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backward_node(i, g, lower);
        }
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
                    None => *acc = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let tracked = |id: NodeId| nodes[id.0].requires_grad;
        macro_rules! acc {
            ($id:expr) => {
                grad_slot(grads, nodes, $id)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if tracked(*a) {
                    let ga = acc!(*a);
                    gemm(g, (n, m), Layout::Normal, vb.data(), (k, m), Layout::Transposed, ga, true);
                }
                if tracked(*b) {
                    let gb = acc!(*b);
                    gemm(va.data(), (n, k), Layout::Transposed, g, (n, m), Layout::Normal, gb, true);
                }
            }
            Op::Transpose(x) => {
                if tracked(*x) {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let gx = acc!(*x);
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if tracked(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if tracked(*b) {
                    let gb = acc!(*b);
                    if neg {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if tracked(*a) {
                    let ga = acc!(*a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if tracked(*b) {
                    let gb = acc!(*b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if tracked(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if tracked(*bias) {
                    let gb = acc!(*bias);
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Scale(x, f) => {
                if tracked(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(a, &b)| *a += b * *f);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if tracked(*x) {
                    let gx = acc!(*x);
                    let mut s = g[0];
                    if matches!(node.op, Op::Mean(_)) {
                        s /= T::of(gx.len() as f64);
                    }
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Act(x, kind) => {
                if tracked(*x) {
                    let y = node.value.data();
                    let xv = nodes[x.0].value.data();
                    let gx = acc!(*x);
                    match kind {
                        Activation::Sigmoid => {
                            for j in 0..g.len() {
                                gx[j] += g[j] * y[j] * (T::one() - y[j]);
                            }
                        }
                        Activation::Relu => {
                            for j in 0..g.len() {
                                if xv[j] > T::zero() {
                                    gx[j] += g[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if tracked(*x) {
                    let y = node.value.data();
                    let (_, cols) = as_rows(&node.value);
                    let gx = acc!(*x);
                    for ((yr, gr), xr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            xr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Lerp { from, to, weight } => {
                let (a, b, w) = (
                    nodes[from.0].value.data(),
                    nodes[to.0].value.data(),
                    nodes[weight.0].value.data(),
                );
                if tracked(*from) {
                    let ga = acc!(*from);
                    for j in 0..g.len() {
                        ga[j] += g[j] * (T::one() - w[j]);
                    }
                }
                if tracked(*to) {
                    let gb = acc!(*to);
                    for j in 0..g.len() {
                        gb[j] += g[j] * w[j];
                    }
                }
                if tracked(*weight) {
                    let gw = acc!(*weight);
                    for j in 0..g.len() {
                        gw[j] += g[j] * (b[j] - a[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len().max(1);
                let d = xhat.len() / d;
                let gv = nodes[gain.0].value.data();
                if tracked(*x) {
                    let gx = acc!(*x);
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dot(&dxhat, hr) / dn;
                        let xr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            xr[j] += is * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if tracked(*gain) {
                    let gg = acc!(*gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if tracked(*bias) {
                    let gb = acc!(*bias);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if tracked(*logits) && *count > 0 {
                    let vocab = probs.len() / targets.len();
                    let s = g[0] / T::of(*count as f64);
                    let gl = acc!(*logits);
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        let pr = &probs[i * vocab..(i + 1) * vocab];
                        let gr = &mut gl[i * vocab..(i + 1) * vocab];
                        for j in 0..vocab {
                            gr[j] += s * pr[j];
                        }
                        gr[t] -= s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if tracked(*table) {
                    let d = node.value.shape()[1];
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                scale,
                probs,
            } => {
                self.attention_backward(g, grads, (*q, *k, *v), layout, *heads, *scale, probs);
            }
            Op::Dropout(x, mask) => {
                if tracked(*x) {
                    let gx = acc!(*x);
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (NodeId, NodeId, NodeId),
        layout: &AttentionLayout,
        heads: usize,
        scale: T,
        probs: &[T],
    ) {
        let nodes = &self.nodes;
        let (qd, kd, vd) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let d = nodes[q.0].value.shape()[1];
        let dh = d / heads;
        let (tq_rg, tk_rg, tv_rg) = (
            nodes[q.0].requires_grad,
            nodes[k.0].requires_grad,
            nodes[v.0].requires_grad,
        );
        // q, k, v may alias (self-attention over one node); accumulate into
        // local buffers, then merge.
        let mut gq = vec![T::zero(); if tq_rg { qd.len() } else { 0 }];
        let mut gk = vec![T::zero(); if tk_rg { kd.len() } else { 0 }];
        let mut gv = vec![T::zero(); if tv_rg { vd.len() } else { 0 }];
        let mut off = 0;
        let mut ds = Vec::new();
        for s in layout.segments() {
            let (nq, nk) = (s.queries.len(), s.keys.len());
            ds.resize(nq * nk, T::zero());
            for h in 0..heads {
                let c0 = h * dh;
                let (qs, ks) = (s.queries.start * d + c0, s.keys.start * d + c0);
                let p = &probs[off..off + nq * nk];
                let go = &g[qs..];
                if tv_rg {
                    // dV_h += P^T dO_h
                    strided_gemm((nk, nq, dh), T::one(), (p, 1, nk), (go, d, 1), T::one(), (&mut gv[ks..], d));
                }
                if tq_rg || tk_rg {
                    // dP = dO_h V_h^T, then dS = P * (dP - rowsum(P * dP)) * scale
                    strided_gemm((nq, dh, nk), T::one(), (go, d, 1), (&vd[ks..], 1, d), T::zero(), (&mut ds, nk));
                    for i in 0..nq {
                        let (pr, dr) = (&p[i * nk..(i + 1) * nk], &mut ds[i * nk..(i + 1) * nk]);
                        let sdp = dot(pr, dr);
                        for (x, &pj) in dr.iter_mut().zip(pr) {
                            *x = pj * (*x - sdp) * scale;
                        }
                    }
                    if tq_rg {
                        strided_gemm((nq, nk, dh), T::one(), (&ds, nk, 1), (&kd[ks..], d, 1), T::one(), (&mut gq[qs..], d));
                    }
                    if tk_rg {
                        strided_gemm((nk, nq, dh), T::one(), (&ds, 1, nk), (&qd[qs..], d, 1), T::one(), (&mut gk[ks..], d));
                    }
                }
                off += nq * nk;
            }
        }
        for (id, local, on) in [(q, gq, tq_rg), (k, gk, tk_rg), (v, gv, tv_rg)] {
            if on {
                let n = local.len();
                let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); n]);
                slot.iter_mut().zip(&local).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

fn grad_slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: NodeId,
) -> &'a mut Vec<T> {
    let n = nodes[id.0].value.numel();
    grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `c = alpha * a * b + beta * c` on row-major views. Each operand is a
/// slice starting at its first element with `(row, column)` strides; `c`
/// has unit column stride.
fn strided_gemm<T: Real>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    (a, rsa, csa): (&[T], usize, usize),
    (b, rsb, csb): (&[T], usize, usize),
    beta: T,
    (c, rsc): (&mut [T], usize),
) {
    if m == 0 || n == 0 || k == 0 {
        if k == 0 && beta == T::zero() {
            for i in 0..m {
                c[i * rsc..i * rsc + n].iter_mut().for_each(|x| *x = T::zero());
            }
        }
        return;
    }
    let last = |r: usize, rs: usize, cl: usize, cs: usize| (r - 1) * rs + (cl - 1) * cs + 1;
    assert!(a.len() >= last(m, rsa, k, csa));
    assert!(b.len() >= last(k, rsb, n, csb));
    assert!(c.len() >= last(m, rsc, n, 1));
    // SAFETY: the asserts bound every element the strides address, and `c`
    // is a unique borrow so it cannot overlap `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `log softmax(row)[index]`, stable.
pub fn log_softmax_at<T: Real>(row: &[T], index: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row[index] - lse
}
