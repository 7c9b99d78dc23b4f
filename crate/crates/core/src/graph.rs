//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of every leaf that asked for one. Only the operations the
//! networks in this crate need are provided.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Real;
use crate::tensor::{numel, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Zero padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pads `k - 1` zeros split as evenly as possible (extra on the right),
    /// so a stride-1 convolution keeps the input length.
    Same,
    Valid,
}

impl Padding {
    pub fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
            Padding::Valid => (0, 0),
        }
    }
}

/// Output length of a 1-D convolution or pooling window.
pub fn window_out_len(len: usize, pad_total: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = len + pad_total;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Normalization statistics for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize with the moments of the current input.
    Batch,
    /// Normalize with stored mean and (biased) variance.
    Fixed { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Bmm { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanAxes { x: Var },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    BroadcastTo(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Iterates every multi-index of `shape` in row-major order, passing the
// linear output index and the offsets given by two stride vectors.
fn for_each_index(shape: &[usize], s1: &[usize], s2: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(shape);
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut o1, mut o2) = (0usize, 0usize);
    for lin in 0..total {
        f(lin, o1, o2);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            o1 += s1[d];
            o2 += s2[d];
            if idx[d] < shape[d] {
                break;
            }
            o1 -= s1[d] * shape[d];
            o2 -= s2[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(st)
        .map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn softmax_lane<T: Real>(x: &[T], y: &mut [T], outer: usize, len: usize, inner: usize, log: bool) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x[at(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                total += (x[at(a)] - max).exp();
            }
            if log {
                let lse = total.ln();
                for a in 0..len {
                    y[at(a)] = x[at(a)] - max - lse;
                }
            } else {
                for a in 0..len {
                    y[at(a)] = (x[at(a)] - max).exp() / total;
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// Leaf holding a copy of a stored parameter. When `trainable` is set
    /// its gradient can be written back with [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId, trainable: bool) -> Result<Var> {
        let value = store.value(id).clone();
        self.leaf(value, trainable, Some(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(name, &sa, &sb)?;
        let mut data = vec![T::zero(); numel(&out)];
        {
            let (xa, xb) = (self.value(a).data(), self.value(b).data());
            if sa == sb {
                for ((d, &x), &y) in data.iter_mut().zip(xa).zip(xb) {
                    *d = f(x, y);
                }
            } else {
                let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
                for_each_index(&out, &ta, &tb, |o, ia, ib| data[o] = f(xa[ia], xb[ib]));
            }
        }
        let value = Tensor::new(out, data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Affine map over the last axis: `x[..., din] @ w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape("dense", format!("input {xs:?} with weights {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("dense", format!("bias {:?}, expected [{dout}]", self.shape(b))));
            }
        }
        let rows = numel(&xs) / din;
        let mut data = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut data, rows, din, dout);
        let mut out = xs;
        *out.last_mut().unwrap() = dout;
        let value = Tensor::new(out, data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("dense", value, Op::Linear { x, w, b, rows, din, dout }, &parents)
    }

    /// Batched matrix product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut data = vec![T::zero(); batch * m * n];
        {
            let (xa, xb) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ai = &xa[i * m * k..(i + 1) * m * k];
                let bi = &xb[i * k * n..(i + 1) * k * n];
                let ci = &mut data[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::matmul_bt_acc(ai, bi, ci, m, k, n);
                } else {
                    kernels::matmul_acc(ai, bi, ci, m, k, n);
                }
            }
        }
        let value = Tensor::new(vec![batch, m, n], data)?;
        self.push("bmm", value, Op::Bmm { a, b, trans_b, batch, m, k, n }, &[a, b])
    }

    /// 1-D convolution of `[batch, len, c_in]` with weights `[k, c_in, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] {
            return Err(Error::shape("conv1d", format!("input {xs:?} with weights {ws:?}")));
        }
        let (kernel, c_in, c_out) = (ws[0], ws[1], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv1d", format!("bias {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        let (pl, pr) = padding.amounts(kernel);
        let len_out = window_out_len(xs[1], pl + pr, kernel, stride).ok_or_else(|| {
            Error::shape("conv1d", format!("kernel {kernel} stride {stride} does not fit length {}", xs[1]))
        })?;
        let geom = ConvGeom {
            batch: xs[0],
            len_in: xs[1],
            len_out,
            kernel,
            stride,
            pad_left: pl,
            c_in,
            c_out,
        };
        let mut data = vec![T::zero(); geom.batch * len_out * c_out];
        kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut data,
        );
        let value = Tensor::new(vec![geom.batch, len_out, c_out], data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv1d", value, Op::Conv1d { x, w, b, geom }, &parents)
    }

    /// Per-channel 'same' convolution of `[batch, len, c]` with weights `[k, c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[2] {
            return Err(Error::shape("depthwise_conv1d", format!("input {xs:?} with weights {ws:?}")));
        }
        let (pl, _) = Padding::Same.amounts(ws[0]);
        let geom = ConvGeom {
            batch: xs[0],
            len_in: xs[1],
            len_out: xs[1],
            kernel: ws[0],
            stride: 1,
            pad_left: pl,
            c_in: xs[2],
            c_out: xs[2],
        };
        let mut data = vec![T::zero(); numel(&xs)];
        kernels::depthwise_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut data,
        );
        let value = Tensor::new(xs, data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("depthwise_conv1d", value, Op::Depthwise { x, w, b, geom }, &parents)
    }

    /// Max pooling along the sequence axis of `[batch, len, c]`.
    pub fn maxpool1d(&mut self, x: Var, pool: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("maxpool1d", format!("expected [batch, len, c], got {xs:?}")));
        }
        let len_out = window_out_len(xs[1], 0, pool, stride)
            .ok_or_else(|| Error::shape("maxpool1d", format!("pool {pool} exceeds length {}", xs[1])))?;
        let mut data = vec![T::zero(); xs[0] * len_out * xs[2]];
        let argmax = kernels::maxpool_forward(self.value(x).data(), xs[0], xs[1], xs[2], pool, stride, len_out, &mut data);
        let value = Tensor::new(vec![xs[0], len_out, xs[2]], data)?;
        self.push("maxpool1d", value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Per-channel normalization over every axis but the last. Returns the
    /// output together with the mean and biased variance that were used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm", format!("input {xs:?} with affine {:?}", self.shape(gamma))));
        }
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let (m, v) = kernels::channel_moments(xv, c);
                (m, v, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "stored statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        for (row, src) in xhat.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
            for ch in 0..c {
                row[ch] = (src[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = vec![T::zero(); xv.len()];
        for (row, src) in data.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                row[ch] = g[ch] * src[ch] + bt[ch];
            }
        }
        let value = Tensor::new(xs, data)?;
        let v = self.push(
            "batchnorm",
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, len, inner) = lanes(&xs, axis);
        let mut data = vec![T::zero(); numel(&xs)];
        softmax_lane(self.value(x).data(), &mut data, outer, len, inner, log);
        let value = Tensor::new(xs, data)?;
        if log {
            self.push("log_softmax", value, Op::LogSoftmax { x, axis }, &[x])
        } else {
            self.push("softmax", value, Op::Softmax { x, axis }, &[x])
        }
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", value, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= xs.len()) {
            return Err(Error::shape("mean_axes", format!("axes {axes:?} out of range for {xs:?}")));
        }
        let mut out = xs.clone();
        let mut count = 1usize;
        for &a in axes {
            if out[a] != 1 {
                count *= out[a];
                out[a] = 1;
            }
        }
        let mut data = vec![T::zero(); numel(&out)];
        {
            let xv = self.value(x).data();
            let (si, so) = (strides(&xs), broadcast_strides(&out, &xs));
            for_each_index(&xs, &si, &so, |_, ix, io| data[io] += xv[ix]);
        }
        let inv = T::one() / T::lit(count as f64);
        for d in data.iter_mut() {
            *d *= inv;
        }
        let value = Tensor::new(out, data)?;
        self.push("mean_axes", value, Op::MeanAxes { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("invalid permutation {perm:?} for {xs:?}")));
        }
        let out: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let st = strides(&xs);
        let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let mut data = vec![T::zero(); numel(&xs)];
        {
            let xv = self.value(x).data();
            for_each_index(&out, &src, &src, |o, ix, _| data[o] = xv[ix]);
        }
        let value = Tensor::new(out, data)?;
        self.push("permute", value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let out = broadcast_shape("broadcast_to", &xs, shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", format!("cannot broadcast {xs:?} to {shape:?}")));
        }
        let bs = broadcast_strides(&xs, shape);
        let mut data = vec![T::zero(); numel(shape)];
        {
            let xv = self.value(x).data();
            for_each_index(shape, &bs, &bs, |o, ix, _| data[o] = xv[ix]);
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("broadcast_to", value, Op::BroadcastTo(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} does not align with {first:?} on axis {axis}")));
            }
            out[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out, data)?;
        self.push("concat", value, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {xs:?}", start + len)));
        }
        let (outer, full, inner) = lanes(&xs, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let xv = self.value(x).data();
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out = xs;
        out[axis] = len;
        let value = Tensor::new(out, data)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// Reverse pass from a scalar. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(ls));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (parent, contribution) in self.local_grads(node, &dy) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(g) => {
                        for (a, b) in g.data_mut().iter_mut().zip(&contribution) {
                            *a += *b;
                        }
                    }
                    slot @ None => {
                        let shape = self.shape(parent).to_vec();
                        *slot = Some(Tensor::new(shape, contribution)?);
                    }
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Vec<(Var, Vec<T>)> {
        let g = dy.data();
        let out_shape = node.value.shape();
        let y = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    if self.wants(v) {
                        res.push((v, self.reduce_to(v, out_shape, g, |_, gv| gv * s)));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let out = out_shape;
                if self.wants(*a) {
                    let mut d = vec![T::zero(); xa.len()];
                    let (ta, tb) = (broadcast_strides(xa.shape(), out), broadcast_strides(xb.shape(), out));
                    for_each_index(out, &ta, &tb, |o, ia, ib| d[ia] += g[o] * xb.data()[ib]);
                    res.push((*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); xb.len()];
                    let (ta, tb) = (broadcast_strides(xa.shape(), out), broadcast_strides(xb.shape(), out));
                    for_each_index(out, &ta, &tb, |o, ia, ib| d[ib] += g[o] * xa.data()[ia]);
                    res.push((*b, d));
                }
            }
            Op::Scale(x, f) => res.push((*x, g.iter().map(|&v| v * *f).collect())),
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.wants(*x) {
                    let mut d = vec![T::zero(); rows * din];
                    kernels::matmul_bt_acc(g, self.value(*w).data(), &mut d, rows, dout, din);
                    res.push((*x, d));
                }
                if self.wants(*w) {
                    let mut d = vec![T::zero(); din * dout];
                    kernels::matmul_at_acc(self.value(*x).data(), g, &mut d, rows, din, dout);
                    res.push((*w, d));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut d = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    res.push((b, d));
                }
            }
            Op::Bmm { a, b, trans_b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &xb[i * k * n..(i + 1) * k * n];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::matmul_acc(gi, bi, di, m, n, k);
                        } else {
                            kernels::matmul_bt_acc(gi, bi, di, m, n, k);
                        }
                    }
                    res.push((*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &xa[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::matmul_at_acc(gi, ai, di, m, n, k);
                        } else {
                            kernels::matmul_at_acc(ai, gi, di, m, k, n);
                        }
                    }
                    res.push((*b, d));
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                let bias = b.filter(|b| self.wants(*b));
                let mut db = bias.map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv1d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                res.extend(bias.zip(db));
            }
            Op::Depthwise { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                let bias = b.filter(|b| self.wants(*b));
                let mut db = bias.map(|_| vec![T::zero(); geom.c_in]);
                kernels::depthwise_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                res.extend(bias.zip(db));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                res.push((*x, d));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.wants(*x) {
                    let mut d = vec![T::zero(); xhat.len()];
                    if *batch_stats {
                        let n = T::lit(rows as f64);
                        for (drow, (grow, hrow)) in d.chunks_exact_mut(c).zip(g.chunks_exact(c).zip(xhat.chunks_exact(c))) {
                            for ch in 0..c {
                                let dxhat = grow[ch] * gam[ch];
                                let sum_dxhat = dbeta[ch] * gam[ch];
                                let sum_dxhat_xhat = dgamma[ch] * gam[ch];
                                drow[ch] = inv_std[ch] / n * (n * dxhat - sum_dxhat - hrow[ch] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ch in 0..c {
                                drow[ch] = grow[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    res.push((*x, d));
                }
                if self.wants(*gamma) {
                    res.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    res.push((*beta, dbeta));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect()));
            }
            Op::Sigmoid(x) => {
                res.push((*x, g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect()));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = lanes(out_shape, *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = lanes(out_shape, *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let total: T = (0..len).map(|a| g[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = g[at(a)] - y[at(a)].exp() * total;
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(&gv, &v)| gv * (v + v)).collect()));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::MeanAxes { x } => {
                let xs = self.shape(*x);
                let count = numel(xs) / numel(out_shape);
                let inv = T::one() / T::lit(count as f64);
                let mut d = vec![T::zero(); numel(xs)];
                let (si, so) = (strides(xs), broadcast_strides(out_shape, xs));
                for_each_index(xs, &si, &so, |_, ix, io| d[ix] = g[io] * inv);
                res.push((*x, d));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let xs = self.shape(*x);
                let st = strides(xs);
                let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let mut d = vec![T::zero(); g.len()];
                for_each_index(out_shape, &src, &src, |o, ix, _| d[ix] = g[o]);
                res.push((*x, d));
            }
            Op::BroadcastTo(x) => {
                let xs = self.shape(*x);
                let bs = broadcast_strides(xs, out_shape);
                let mut d = vec![T::zero(); numel(xs)];
                for_each_index(out_shape, &bs, &bs, |o, ix, _| d[ix] += g[o]);
                res.push((*x, d));
            }
            Op::Concat { xs, axis } => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[*axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        res.push((v, d));
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = lanes(xs, *axis);
                let len = out_shape[*axis];
                let mut d = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, d));
            }
        }
        res
    }

    fn reduce_to(&self, v: Var, out: &[usize], g: &[T], f: impl Fn(usize, T) -> T) -> Vec<T> {
        let vs = self.shape(v);
        if vs == out {
            return g.iter().enumerate().map(|(i, &x)| f(i, x)).collect();
        }
        let bs = broadcast_strides(vs, out);
        let mut d = vec![T::zero(); numel(vs)];
        for_each_index(out, &bs, &bs, |o, iv, _| d[iv] += f(o, g[o]));
        d
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Linear { .. } => "dense",
        Op::Bmm { .. } => "bmm",
        Op::Conv1d { .. } => "conv1d",
        Op::Depthwise { .. } => "depthwise_conv1d",
        Op::MaxPool { .. } => "maxpool1d",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Square(_) => "square",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::MeanAxes { .. } => "mean_axes",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::BroadcastTo(_) => "broadcast_to",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every trainable parameter leaf on `tape` into
    /// the parameter's gradient buffer.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParameterStore<T>) -> Result<()> {
        for (node, grad) in tape.nodes.iter().zip(&self.grads) {
            if let (Some(id), true) = (node.param, node.requires_grad) {
                match grad {
                    Some(g) => store.accumulate_grad(id, g.data())?,
                    None => store.accumulate_grad(id, &vec![T::zero(); node.value.len()])?,
                }
            }
        }
        Ok(())
    }
}
