//! Reverse-mode autodiff on a linear tape.
//!
//! Each operation appends one node holding its output value; operands are
//! referenced by [`TensorId`], so the tape is in SSA form and a reverse walk
//! is a valid topological order for backpropagation. Binary elementwise ops
//! broadcast right-aligned (trailing axes), numpy-style, restricted to
//! matching extents or extent 1.
//!
//! Every op validates shapes up front and scans its output for non-finite
//! values, so NaN/Inf fail fast at the producing op instead of surfacing
//! later as a corrupted loss.

use super::array::{strides_of, Array};
use super::{ensure_finite, Scalar};
use crate::error::{OwmError, Result};

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

enum Op<S> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    /// x * mul + add with constants; covers negation, scaling by 1/tau,
    /// loss weighting. The offset has zero derivative, so only `mul` is kept.
    Affine { x: TensorId, mul: S },
    Matmul { a: TensorId, b: TensorId },
    Permute { x: TensorId, axes: Vec<usize> },
    Reshape { x: TensorId },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize },
    /// Per-leading-index row selection along `axis`; idx is row-major over
    /// (leading extents..., k).
    Gather { x: TensorId, axis: usize, k: usize, idx: Vec<usize> },
    Exp(TensorId),
    Abs(TensorId),
    Tanh(TensorId),
    Gelu(TensorId),
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, xhat: Vec<S>, inv_std: Vec<S> },
    SumAxis { x: TensorId, axis: usize },
    MaxAxis { x: TensorId, axis: usize, argmax: Vec<usize> },
    MeanAll(TensorId),
    /// Identity forward, gradient scaled by `c` backward. c = 0 stops
    /// gradient; other values exist for deliberate fault injection in the
    /// gradient-check harness.
    GradScale { x: TensorId, c: S },
}

struct Node<S> {
    value: Array<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`TensorId`].
pub struct Gradients<S> {
    grads: Vec<Option<Array<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient w.r.t. the node, if it participated in the backward pass.
    pub fn wrt(&self, id: TensorId) -> Option<&Array<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    /// When set, max reductions with a runner-up within the margin and abs
    /// inputs within the margin of zero raise the near-tie flag. Used by the
    /// gradient checker to redraw probes near non-differentiable points.
    tie_margin: Option<f64>,
    near_tie: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), tie_margin: None, near_tie: false }
    }

    pub fn set_tie_margin(&mut self, margin: Option<f64>) {
        self.tie_margin = margin;
    }

    /// True if any op since the last reset evaluated within the tie margin
    /// of a non-differentiable point.
    pub fn near_tie_seen(&self) -> bool {
        self.near_tie
    }

    pub fn value(&self, id: TensorId) -> &Array<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Registers a trainable leaf.
    pub fn input(&mut self, value: Array<S>) -> TensorId {
        self.push_leaf(value, true)
    }

    /// Registers a non-trainable leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Array<S>) -> TensorId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Array<S>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<S>, op: Op<S>, rg: bool) -> Result<TensorId> {
        ensure_finite(op_name, &data)?;
        self.nodes.push(Node { value: Array::from_vec_unchecked(shape, data), op, requires_grad: rg });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(op_name, va.shape(), vb.shape())?;
        let sa = bcast_strides(&out_shape, va.shape());
        let sb = bcast_strides(&out_shape, vb.shape());
        let mut out = vec![S::zero(); out_shape.iter().product::<usize>().max(1)];
        let (da, db) = (va.data(), vb.data());
        for_each2(&out_shape, &sa, &sb, |flat, oa, ob| out[flat] = f(da[oa], db[ob]));
        let rg = self.rg(a) || self.rg(b);
        self.push(op_name, out_shape, out, op, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let (m, c) = (S::from_f64(mul), S::from_f64(add));
        let v = &self.nodes[x.0].value;
        let out: Vec<S> = v.data().iter().map(|&e| e * m + c).collect();
        let rg = self.rg(x);
        self.push("affine", v.shape().to_vec(), out, Op::Affine { x, mul: m }, rg)
    }

    // ---- unary elementwise ----

    fn unary(&mut self, op_name: &'static str, x: TensorId, f: impl Fn(S) -> S, op: Op<S>) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out: Vec<S> = v.data().iter().map(|&e| f(e)).collect();
        let rg = self.rg(x);
        self.push(op_name, v.shape().to_vec(), out, op, rg)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, |e| e.exp(), Op::Exp(x))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(m) = self.tie_margin {
            if self.nodes[x.0].value.data().iter().any(|&e| e.to_f64().abs() < m) {
                self.near_tie = true;
            }
        }
        self.unary("abs", x, |e| e.abs(), Op::Abs(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("tanh", x, |e| e.tanh(), Op::Tanh(x))
    }

    /// Tanh-approximation GELU; the backward pass differentiates the
    /// approximation exactly.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let c = S::from_f64(SQRT_2_OVER_PI);
        let a = S::from_f64(GELU_CUBIC);
        let half = S::from_f64(0.5);
        self.unary(
            "gelu",
            x,
            |e| half * e * (S::one() + (c * (e + a * e * e * e)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn grad_scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out = v.data().to_vec();
        let rg = self.rg(x);
        self.push("grad_scale", v.shape().to_vec(), out, Op::GradScale { x, c: S::from_f64(c) }, rg)
    }

    // ---- matmul ----

    /// a: (..., m, k) @ b: (k, n) or (..., k, n) with identical leading
    /// extents. The rank-2 b case flattens all leading axes of a into one
    /// GEMM call.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(OwmError::shape("matmul", format!("ranks {sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(OwmError::shape("matmul", format!("inner extents {sa:?} @ {sb:?}")));
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![S::zero(); lead * m * n];
        if sb.len() == 2 {
            gemm(lead * m, k, n, va.data(), (k as isize, 1), vb.data(), (n as isize, 1), &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(OwmError::shape("matmul", format!("leading extents {sa:?} @ {sb:?}")));
            }
            for l in 0..lead {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[l * m * k..(l + 1) * m * k],
                    (k as isize, 1),
                    &vb.data()[l * k * n..(l + 1) * k * n],
                    (n as isize, 1),
                    &mut out[l * m * n..(l + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out_shape, out, Op::Matmul { a, b }, rg)
    }

    // ---- structural ----

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(OwmError::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let in_strides = v.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
        let sx: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![S::zero(); v.len()];
        let data = v.data();
        for_each1(&out_shape, &sx, |flat, ox| out[flat] = data[ox]);
        let rg = self.rg(x);
        self.push("permute", out_shape, out, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != v.len() || shape.iter().any(|&e| e == 0) {
            return Err(OwmError::shape("reshape", format!("{:?} -> {shape:?}", v.shape())));
        }
        let out = v.data().to_vec();
        let rg = self.rg(x);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { x }, rg)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(OwmError::shape("concat", "no parts".to_string()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(OwmError::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(OwmError::shape("concat", format!("incompatible part {s:?} vs {first:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); outer * axis_total * inner];
        let row = axis_total * inner;
        let mut off = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let ext = v.shape()[axis];
            let chunk = ext * inner;
            for o in 0..outer {
                out[o * row + off..o * row + off + chunk]
                    .copy_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
            off += chunk;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", out_shape, out, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(OwmError::shape(
                "slice",
                format!("axis {axis} [{start}, {start}+{len}) of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![S::zero(); outer * len * inner];
        let in_row = shape[axis] * inner;
        let chunk = len * inner;
        for o in 0..outer {
            out[o * chunk..(o + 1) * chunk]
                .copy_from_slice(&v.data()[o * in_row + start * inner..o * in_row + start * inner + chunk]);
        }
        let rg = self.rg(x);
        self.push("slice", out_shape, out, Op::Slice { x, axis, start }, rg)
    }

    /// Selects `k` rows along `axis` per leading index. `idx` is row-major
    /// over (x.shape[..axis], k); every entry must be < x.shape[axis].
    pub fn gather(&mut self, x: TensorId, axis: usize, k: usize, idx: &[usize]) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() || k == 0 {
            return Err(OwmError::shape("gather", format!("axis {axis} k {k} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        if idx.len() != outer * k || idx.iter().any(|&i| i >= ext) {
            return Err(OwmError::shape("gather", format!("index table for {shape:?}, k {k}")));
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = k;
        let mut out = vec![S::zero(); outer * k * inner];
        for o in 0..outer {
            for j in 0..k {
                let src = (o * ext + idx[o * k + j]) * inner;
                let dst = (o * k + j) * inner;
                out[dst..dst + inner].copy_from_slice(&v.data()[src..src + inner]);
            }
        }
        let rg = self.rg(x);
        self.push("gather", out_shape, out, Op::Gather { x, axis, k, idx: idx.to_vec() }, rg)
    }

    // ---- reductions and normalization ----

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let (outer, ext, inner) = lanes("sum_axis", v.shape(), axis)?;
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![S::zero(); outer * inner];
        let data = v.data();
        for o in 0..outer {
            for t in 0..inner {
                let mut acc = S::zero();
                for i in 0..ext {
                    acc += data[(o * ext + i) * inner + t];
                }
                out[o * inner + t] = acc;
            }
        }
        let rg = self.rg(x);
        self.push("sum_axis", out_shape, out, Op::SumAxis { x, axis }, rg)
    }

    /// Max over `axis`; ties resolve to the lowest index, and the gradient
    /// flows only to that element.
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let (outer, ext, inner) = lanes("max_axis", v.shape(), axis)?;
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![S::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        let data = v.data();
        let mut min_gap = f64::INFINITY;
        for o in 0..outer {
            for t in 0..inner {
                let mut best = data[o * ext * inner + t];
                let mut best_i = 0usize;
                let mut second = f64::NEG_INFINITY;
                for i in 1..ext {
                    let e = data[(o * ext + i) * inner + t];
                    if e > best {
                        second = best.to_f64();
                        best = e;
                        best_i = i;
                    } else if e.to_f64() > second {
                        second = e.to_f64();
                    }
                }
                if ext > 1 {
                    min_gap = min_gap.min(best.to_f64() - second);
                }
                out[o * inner + t] = best;
                argmax[o * inner + t] = best_i;
            }
        }
        if let Some(m) = self.tie_margin {
            if min_gap < m {
                self.near_tie = true;
            }
        }
        let rg = self.rg(x);
        self.push("max_axis", out_shape, out, Op::MaxAxis { x, axis, argmax }, rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let n = S::from_f64(v.len() as f64);
        let mut acc = S::zero();
        for &e in v.data() {
            acc += e;
        }
        let rg = self.rg(x);
        self.push("mean_all", vec![], vec![acc / n], Op::MeanAll(x), rg)
    }

    /// Numerically stable softmax over `axis` (max-subtracted).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let (outer, ext, inner) = lanes("softmax", v.shape(), axis)?;
        let mut out = vec![S::zero(); v.len()];
        let data = v.data();
        for o in 0..outer {
            for t in 0..inner {
                let base = o * ext * inner + t;
                let mut m = data[base];
                for i in 1..ext {
                    m = m.max(data[base + i * inner]);
                }
                let mut z = S::zero();
                for i in 0..ext {
                    let e = (data[base + i * inner] - m).exp();
                    out[base + i * inner] = e;
                    z += e;
                }
                for i in 0..ext {
                    out[base + i * inner] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push("softmax", v.shape().to_vec(), out, Op::Softmax { x, axis }, rg)
    }

    /// Layer normalization over the last axis with learned gain and bias
    /// (both shaped (d,)).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        let d = *shape.last().ok_or_else(|| OwmError::shape("layer_norm", "rank 0 input".to_string()))?;
        let (vg, vb) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(OwmError::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for last extent {d}", vg.shape(), vb.shape()),
            ));
        }
        let rows = v.len() / d;
        let eps = S::from_f64(1e-5);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::zero(); v.len()];
        let mut xhat = vec![S::zero(); v.len()];
        let mut inv_std = vec![S::zero(); rows];
        let (data, g, b) = (v.data(), vg.data(), vb.data());
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mut mean = S::zero();
            for &e in row {
                mean += e;
            }
            mean *= inv_d;
            let mut var = S::zero();
            for &e in row {
                let c = e - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let h = (row[i] - mean) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = g[i] * h + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    // ---- backward ----

    /// Backpropagates from a single-element `loss` node and returns the
    /// gradients of every participating node.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(OwmError::shape(
                "backward",
                format!("loss must hold one element, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            out.push(match g {
                Some(v) => {
                    ensure_finite("backward", &v)?;
                    Some(Array::from_vec_unchecked(self.nodes[i].value.shape().to_vec(), v))
                }
                None => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    fn vjp(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_reduced(*a, g, out_shape, grads);
                self.acc_reduced(*b, g, out_shape, grads);
            }
            Op::Sub(a, b) => {
                self.acc_reduced(*a, g, out_shape, grads);
                let neg: Vec<S> = g.iter().map(|&e| -e).collect();
                self.acc_reduced(*b, &neg, out_shape, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let sa = bcast_strides(out_shape, va.shape());
                let sb = bcast_strides(out_shape, vb.shape());
                if self.rg(*a) {
                    let mut ga = vec![S::zero(); g.len()];
                    let db = vb.data();
                    for_each2(out_shape, &sa, &sb, |flat, _, ob| ga[flat] = g[flat] * db[ob]);
                    self.acc_reduced(*a, &ga, out_shape, grads);
                }
                if self.rg(*b) {
                    let mut gb = vec![S::zero(); g.len()];
                    let da = va.data();
                    for_each2(out_shape, &sa, &sb, |flat, oa, _| gb[flat] = g[flat] * da[oa]);
                    self.acc_reduced(*b, &gb, out_shape, grads);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let sa = bcast_strides(out_shape, va.shape());
                let sb = bcast_strides(out_shape, vb.shape());
                if self.rg(*a) {
                    let mut ga = vec![S::zero(); g.len()];
                    let db = vb.data();
                    for_each2(out_shape, &sa, &sb, |flat, _, ob| ga[flat] = g[flat] / db[ob]);
                    self.acc_reduced(*a, &ga, out_shape, grads);
                }
                if self.rg(*b) {
                    let mut gb = vec![S::zero(); g.len()];
                    let (da, db) = (va.data(), vb.data());
                    for_each2(out_shape, &sa, &sb, |flat, oa, ob| {
                        gb[flat] = -g[flat] * da[oa] / (db[ob] * db[ob]);
                    });
                    self.acc_reduced(*b, &gb, out_shape, grads);
                }
            }
            Op::Affine { x, mul } => {
                if self.rg(*x) {
                    let gx: Vec<S> = g.iter().map(|&e| e * *mul).collect();
                    acc_into(grads, x.0, &gx, self.nodes[x.0].value.len());
                }
            }
            Op::Matmul { a, b } => self.vjp_matmul(*a, *b, out_shape, g, grads),
            Op::Permute { x, axes } => {
                if self.rg(*x) {
                    let in_strides = self.nodes[x.0].value.strides();
                    let sx: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                    let gx = acc_slot(grads, x.0, self.nodes[x.0].value.len());
                    for_each1(out_shape, &sx, |flat, ox| gx[ox] += g[flat]);
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    acc_into(grads, x.0, g, self.nodes[x.0].value.len());
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut off = 0usize;
                for &p in parts {
                    let ext = self.nodes[p.0].value.shape()[*axis];
                    let chunk = ext * inner;
                    if self.rg(p) {
                        let gp = acc_slot(grads, p.0, self.nodes[p.0].value.len());
                        for o in 0..outer {
                            for (dst, src) in
                                gp[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[o * row + off..o * row + off + chunk])
                            {
                                *dst += *src;
                            }
                        }
                    }
                    off += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.rg(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let len = out_shape[*axis];
                    let in_row = in_shape[*axis] * inner;
                    let chunk = len * inner;
                    let gx = acc_slot(grads, x.0, self.nodes[x.0].value.len());
                    for o in 0..outer {
                        let base = o * in_row + start * inner;
                        for (dst, src) in gx[base..base + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                            *dst += *src;
                        }
                    }
                }
            }
            Op::Gather { x, axis, k, idx } => {
                if self.rg(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let ext = in_shape[*axis];
                    let gx = acc_slot(grads, x.0, self.nodes[x.0].value.len());
                    for o in 0..outer {
                        for j in 0..*k {
                            let dst = (o * ext + idx[o * k + j]) * inner;
                            let src = (o * k + j) * inner;
                            for t in 0..inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let gx: Vec<S> = g.iter().zip(y).map(|(&e, &v)| e * v).collect();
                    acc_into(grads, x.0, &gx, gx.len());
                }
            }
            Op::Abs(x) => {
                if self.rg(*x) {
                    let xin = self.nodes[x.0].value.data();
                    let gx: Vec<S> = g
                        .iter()
                        .zip(xin)
                        .map(|(&e, &v)| {
                            if v > S::zero() {
                                e
                            } else if v < S::zero() {
                                -e
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    acc_into(grads, x.0, &gx, gx.len());
                }
            }
            Op::Tanh(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let gx: Vec<S> = g.iter().zip(y).map(|(&e, &v)| e * (S::one() - v * v)).collect();
                    acc_into(grads, x.0, &gx, gx.len());
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let c = S::from_f64(SQRT_2_OVER_PI);
                    let a = S::from_f64(GELU_CUBIC);
                    let half = S::from_f64(0.5);
                    let three_a = S::from_f64(3.0 * GELU_CUBIC);
                    let xin = self.nodes[x.0].value.data();
                    let gx: Vec<S> = g
                        .iter()
                        .zip(xin)
                        .map(|(&e, &v)| {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let sech2 = S::one() - t * t;
                            let du = c * (S::one() + three_a * v * v);
                            e * (half * (S::one() + t) + half * v * sech2 * du)
                        })
                        .collect();
                    acc_into(grads, x.0, &gx, gx.len());
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let (outer, ext, inner) = lanes("softmax", out_shape, *axis)?;
                    let mut gx = vec![S::zero(); y.len()];
                    for o in 0..outer {
                        for t in 0..inner {
                            let base = o * ext * inner + t;
                            let mut dot = S::zero();
                            for i in 0..ext {
                                dot += g[base + i * inner] * y[base + i * inner];
                            }
                            for i in 0..ext {
                                let p = base + i * inner;
                                gx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    acc_into(grads, x.0, &gx, gx.len());
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *out_shape.last().unwrap();
                let rows = node.value.len() / d;
                let gdat = self.nodes[gain.0].value.data();
                let inv_d = S::from_f64(1.0 / d as f64);
                if self.rg(*x) {
                    let mut gx = vec![S::zero(); node.value.len()];
                    for r in 0..rows {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_xhat = S::zero();
                        for i in 0..d {
                            let dh = g[r * d + i] * gdat[i];
                            mean_dh += dh;
                            mean_dh_xhat += dh * xhat[r * d + i];
                        }
                        mean_dh *= inv_d;
                        mean_dh_xhat *= inv_d;
                        for i in 0..d {
                            let dh = g[r * d + i] * gdat[i];
                            gx[r * d + i] = inv_std[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_xhat);
                        }
                    }
                    acc_into(grads, x.0, &gx, gx.len());
                }
                if self.rg(*gain) {
                    let mut gg = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                    acc_into(grads, gain.0, &gg, d);
                }
                if self.rg(*bias) {
                    let mut gb = vec![S::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                    acc_into(grads, bias.0, &gb, d);
                }
            }
            Op::SumAxis { x, axis } => {
                if self.rg(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, ext, inner) = lanes("sum_axis", &in_shape, *axis)?;
                    let gx = acc_slot(grads, x.0, self.nodes[x.0].value.len());
                    for o in 0..outer {
                        for i in 0..ext {
                            for t in 0..inner {
                                gx[(o * ext + i) * inner + t] += g[o * inner + t];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                if self.rg(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, ext, inner) = lanes("max_axis", &in_shape, *axis)?;
                    let gx = acc_slot(grads, x.0, self.nodes[x.0].value.len());
                    for o in 0..outer {
                        for t in 0..inner {
                            let i = argmax[o * inner + t];
                            gx[(o * ext + i) * inner + t] += g[o * inner + t];
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.rg(*x) {
                    let n = self.nodes[x.0].value.len();
                    let s = g[0] * S::from_f64(1.0 / n as f64);
                    let gx = acc_slot(grads, x.0, n);
                    for e in gx.iter_mut() {
                        *e += s;
                    }
                }
            }
            Op::GradScale { x, c } => {
                if self.rg(*x) {
                    let gx: Vec<S> = g.iter().map(|&e| e * *c).collect();
                    acc_into(grads, x.0, &gx, gx.len());
                }
            }
        }
        Ok(())
    }

    fn vjp_matmul(&self, a: TensorId, b: TensorId, out_shape: &[usize], g: &[S], grads: &mut [Option<Vec<S>>]) {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = out_shape[out_shape.len() - 1];
        let lead: usize = sa[..sa.len() - 2].iter().product();
        if sb.len() == 2 {
            // dA(L*m, k) += dC(L*m, n) @ B^T(n, k)
            if self.rg(a) {
                let ga = acc_slot(grads, a.0, va.len());
                gemm(lead * m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), ga);
            }
            // dB(k, n) += A^T(k, L*m) @ dC(L*m, n); accumulates over the batch.
            if self.rg(b) {
                let gb = acc_slot(grads, b.0, vb.len());
                gemm(k, lead * m, n, va.data(), (1, k as isize), g, (n as isize, 1), gb);
            }
        } else {
            if self.rg(a) {
                let ga = acc_slot(grads, a.0, va.len());
                for l in 0..lead {
                    gemm(
                        m,
                        n,
                        k,
                        &g[l * m * n..(l + 1) * m * n],
                        (n as isize, 1),
                        &vb.data()[l * k * n..(l + 1) * k * n],
                        (1, n as isize),
                        &mut ga[l * m * k..(l + 1) * m * k],
                    );
                }
            }
            if self.rg(b) {
                let gb = acc_slot(grads, b.0, vb.len());
                for l in 0..lead {
                    gemm(
                        k,
                        m,
                        n,
                        &va.data()[l * m * k..(l + 1) * m * k],
                        (1, k as isize),
                        &g[l * m * n..(l + 1) * m * n],
                        (n as isize, 1),
                        &mut gb[l * k * n..(l + 1) * k * n],
                    );
                }
            }
        }
    }

    /// Accumulates a full-output-shape gradient into an operand slot,
    /// summing over broadcast axes.
    fn acc_reduced(&self, id: TensorId, g: &[S], out_shape: &[usize], grads: &mut [Option<Vec<S>>]) {
        if !self.rg(id) {
            return;
        }
        let in_shape = self.nodes[id.0].value.shape();
        let n = self.nodes[id.0].value.len();
        if in_shape == out_shape {
            acc_into(grads, id.0, g, n);
            return;
        }
        let sx = bcast_strides(out_shape, in_shape);
        let gx = acc_slot(grads, id.0, n);
        for_each1(out_shape, &sx, |flat, ox| gx[ox] += g[flat]);
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn acc_slot<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, n: usize) -> &mut Vec<S> {
    grads[i].get_or_insert_with(|| vec![S::zero(); n])
}

fn acc_into<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, g: &[S], n: usize) {
    let slot = acc_slot(grads, i, n);
    for (dst, src) in slot.iter_mut().zip(g) {
        *dst += *src;
    }
}

/// (outer, axis extent, inner) factorization of `shape` around `axis`.
fn lanes(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(OwmError::shape(op, format!("axis {axis} for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0usize; r];
    for i in 0..r {
        let ea = if i >= r - a.len() { a[i - (r - a.len())] } else { 1 };
        let eb = if i >= r - b.len() { b[i - (r - b.len())] } else { 1 };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(OwmError::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Strides for reading `in_shape` (right-aligned) at every index of
/// `out_shape`; broadcast axes get stride 0.
fn bcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let ri = in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut s = vec![0usize; r];
    for i in 0..ri {
        let o = r - ri + i;
        if in_shape[i] == out_shape[o] {
            s[o] = in_strides[i];
        }
    }
    s
}

/// Iterates every flat index of `shape`, tracking one strided input offset.
fn for_each1(shape: &[usize], sx: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut ox = 0usize;
    for flat in 0..n.max(1) {
        f(flat, ox);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ox += sx[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            ox -= sx[ax] * shape[ax];
        }
    }
}

/// As [`for_each1`] with two strided input offsets.
fn for_each2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n.max(1) {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
}

/// c(m, n) += a(m, k) @ b(k, n) with (row, col) strides per input; c is
/// contiguous row-major.
fn gemm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], sa: (isize, isize), b: &[S], sb: (isize, isize), c: &mut [S]) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        S::gemm_acc(m, k, n, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, c.as_mut_ptr(), n as isize, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_add_trailing_singleton() {
        let mut t = Tape::new();
        let a = t.input(arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = t.input(arr(&[2, 1], &[10., 20.]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11., 12., 13., 24., 25., 26.]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Array::zeros(&[2, 3]));
        let b = t.input(Array::zeros(&[4]));
        assert!(t.add(a, b).is_err());
        let c = t.input(Array::zeros(&[3, 2]));
        assert!(t.matmul(a, c).is_ok());
        assert!(t.matmul(c, c).is_err());
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut t = Tape::new();
        let a = t.input(arr(&[2, 2], &[1., 2., 3., 4.]));
        let b = t.input(arr(&[2, 2], &[5., 6., 7., 8.]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut t = Tape::new();
        let a = t.input(arr(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = t.input(arr(&[2, 2, 1], &[1., 1., 2., 0.5]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1, 1]);
        assert_eq!(t.value(c).data(), &[3., 8.]);
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        // loss = mean(A @ B), dL/dA = (1/4) * row sums of B^T etc.
        let mut t = Tape::new();
        let a = t.input(arr(&[2, 2], &[1., 2., 3., 4.]));
        let b = t.input(arr(&[2, 2], &[5., 6., 7., 8.]));
        let c = t.matmul(a, b).unwrap();
        let l = t.mean_all(c).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[2.75, 3.75, 2.75, 3.75]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 1.0, 1.5, 1.5]);
    }

    #[test]
    fn softmax_lanes_sum_to_one_and_survive_large_inputs() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2, 3], &[1e4, 1e4 + 1., 1e4 + 2., -1e4, 0., 1e4]));
        let y = t.softmax(x, 1).unwrap();
        let d = t.value(y).data();
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_axis_tie_routes_gradient_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.input(arr(&[3], &[3., 5., 5.]));
        let m = t.max_axis(x, 0).unwrap();
        assert_eq!(t.value(m).item(), 5.0);
        let l = t.mean_all(m).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0., 1., 0.]);
    }

    #[test]
    fn near_tie_flag_arms_only_within_margin() {
        let mut t = Tape::new();
        t.set_tie_margin(Some(1e-3));
        let x = t.input(arr(&[2], &[1.0, 2.0]));
        t.max_axis(x, 0).unwrap();
        assert!(!t.near_tie_seen());
        let y = t.input(arr(&[2], &[1.0, 1.0 + 1e-5]));
        t.max_axis(y, 0).unwrap();
        assert!(t.near_tie_seen());
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]));
        let l = t.slice(x, 1, 0, 2).unwrap();
        let r = t.slice(x, 1, 2, 2).unwrap();
        let y = t.concat(&[l, r], 1).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn permute_roundtrip() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2, 3, 4], &(0..24).map(|i| i as f64).collect::<Vec<_>>()));
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back).data(), t.value(x).data());
    }

    #[test]
    fn gather_selects_rows_per_leading_index() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2, 3, 2], &[0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11.]));
        let y = t.gather(x, 1, 2, &[2, 0, 1, 1]).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2]);
        assert_eq!(t.value(y).data(), &[4., 5., 0., 1., 8., 9., 8., 9.]);
    }

    #[test]
    fn division_by_zero_fails_fast() {
        let mut t = Tape::new();
        let a = t.input(arr(&[1], &[1.0]));
        let b = t.input(arr(&[1], &[0.0]));
        assert!(t.div(a, b).is_err());
    }

    #[test]
    fn grad_scale_is_identity_forward_and_scales_backward() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2], &[3., 4.]));
        let y = t.grad_scale(x, 2.0).unwrap();
        assert_eq!(t.value(y).data(), &[3., 4.]);
        let l = t.mean_all(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2], &[3., 4.]));
        let y = t.grad_scale(x, 0.0).unwrap();
        let z = t.mul(x, y).unwrap();
        let l = t.mean_all(z).unwrap();
        let g = t.backward(l).unwrap();
        // d/dx of x * stopgrad(x) is stopgrad(x) alone.
        assert_eq!(g.wrt(x).unwrap().data(), &[1.5, 2.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized_before_gain_bias() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2, 4], &[1., 2., 3., 4., -1., 0., 3., 10.]));
        let g = t.input(arr(&[4], &[1., 1., 1., 1.]));
        let b = t.input(arr(&[4], &[0., 0., 0., 0.]));
        let y = t.layer_norm(x, g, b).unwrap();
        for r in 0..2 {
            let row = &t.value(y).data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_subgraphs_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.input(arr(&[2], &[1., 2.]));
        let c = t.constant(arr(&[2], &[5., 5.]));
        let y = t.mul(x, c).unwrap();
        let l = t.mean_all(y).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[2.5, 2.5]);
    }
}
