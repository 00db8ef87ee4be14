//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive pushes one node holding its forward value and whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! ```
//! use interctc::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let p = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = tape.sum(p).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    AddRow,
    Scale,
    Relu,
    Sigmoid,
    Swish,
    Glu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    DepthwiseConv,
    SliceCols,
    ConcatCols,
    Sum,
    External,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Add,
        Primitive::AddRow,
        Primitive::Scale,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Swish,
        Primitive::Glu,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::LayerNorm,
        Primitive::DepthwiseConv,
        Primitive::SliceCols,
        Primitive::ConcatCols,
        Primitive::Sum,
        Primitive::External,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Scale => "scale",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Swish => "swish",
            Primitive::Glu => "glu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::DepthwiseConv => "depthwise_conv1d",
            Primitive::SliceCols => "slice_cols",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Sum => "sum",
            Primitive::External => "external",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown primitive `{s}`"))
    }
}

thread_local! {
    static SIGN_FLIP: Cell<Option<Primitive>> = const { Cell::new(None) };
}

/// Mutation hooks used to prove the gradient checker catches broken backward
/// rules. Affects only the calling thread.
#[doc(hidden)]
pub mod fault {
    use super::{Primitive, SIGN_FLIP};

    pub fn inject_sign_flip(primitive: Primitive) {
        SIGN_FLIP.with(|f| f.set(Some(primitive)));
    }

    pub fn clear() {
        SIGN_FLIP.with(|f| f.set(None));
    }

    pub(super) fn active() -> Option<Primitive> {
        SIGN_FLIP.with(|f| f.get())
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    DepthwiseConv(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    External {
        input: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Scale(..) => Primitive::Scale,
            Op::Relu(..) => Primitive::Relu,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Swish(..) => Primitive::Swish,
            Op::Glu(..) => Primitive::Glu,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::DepthwiseConv(..) => Primitive::DepthwiseConv,
            Op::SliceCols(..) => Primitive::SliceCols,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::Sum(..) => Primitive::Sum,
            Op::External { .. } => Primitive::External,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of a computation. Call [`Tape::reset_grads`] between
/// optimization steps if the tape is reused; gradients accumulate otherwise.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `(outer, n, inner)` such that element `(o, i, j)` sits at `(o * n + i) * inner + j`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let br = &b[j * n..(j + 1) * n];
            out[i * k + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient for `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape(), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        let value = Tensor::new(shape, data)?;
        if !value.is_finite() {
            let op = op.primitive().map_or("leaf", Primitive::name);
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.value(v).shape() {
            [m, n] => Ok((m, n)),
            ref s => Err(TensorError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(&[m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(&[n, m], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(&shape, out, Op::Add(a, b))
    }

    /// Adds vector `b` (length = last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.len() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let bias = tb.data();
        let out = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(&shape, out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let t = self.value(a).map(|v| v * c);
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let t = self.value(a).map(f);
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |v| v * sigmoid(v), Op::Swish(a))
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the second half.
    pub fn glu(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = t.last_dim();
        if !n.is_multiple_of(2) {
            return Err(TensorError::InvalidArgument {
                op: "glu",
                reason: format!("last extent {n} is odd"),
            });
        }
        let h = n / 2;
        let out = t
            .data()
            .chunks(n)
            .flat_map(|row| (0..h).map(move |i| row[i] * sigmoid(row[h + i])))
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        self.push(&shape, out, Op::Glu(a))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var, TensorError> {
        let name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(name, a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = axis_layout(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..n).map(|i| (x[idx(i)] - max).exp()).sum();
                let log_total = total.ln();
                for i in 0..n {
                    let shifted = x[idx(i)] - max;
                    out[idx(i)] = if log {
                        shifted - log_total
                    } else {
                        shifted.exp() / total
                    };
                }
            }
        }
        let shape = t.shape().to_vec();
        let op = if log {
            Op::LogSoftmax(a, axis)
        } else {
            Op::Softmax(a, axis)
        };
        self.push(&shape, out, op)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_impl(a, axis, true)
    }

    /// Normalizes each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.last_dim();
        if tg.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let (g, b) = (tg.data(), tb.data());
        let out = xhat
            .chunks(n)
            .flat_map(|row| (0..n).map(move |i| row[i] * g[i] + b[i]))
            .collect();
        let shape = tx.shape().to_vec();
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
        )
    }

    /// Per-channel 1-D cross-correlation with zero "same" padding.
    /// `x` is `T×C`, `kernel` is `K×C` with odd `K`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let (t, c) = self.matrix_dims("depthwise_conv1d", x)?;
        let (k, kc) = self.matrix_dims("depthwise_conv1d", kernel)?;
        if kc != c {
            return Err(mismatch("depthwise_conv1d", self.value(x), self.value(kernel)));
        }
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "depthwise_conv1d",
                reason: format!("kernel width {k} must be odd"),
            });
        }
        let (xs, ks) = (self.value(x).data(), self.value(kernel).data());
        let half = k / 2;
        let mut out = vec![0.0; t * c];
        for tt in 0..t {
            for kk in 0..k {
                let Some(src) = (tt + kk).checked_sub(half).filter(|&s| s < t) else {
                    continue;
                };
                let (orow, xrow, krow) = (
                    &mut out[tt * c..(tt + 1) * c],
                    &xs[src * c..(src + 1) * c],
                    &ks[kk * c..(kk + 1) * c],
                );
                for ch in 0..c {
                    orow[ch] += krow[ch] * xrow[ch];
                }
            }
        }
        self.push(&[t, c], out, Op::DepthwiseConv(x, kernel))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("slice_cols", a)?;
        if start >= end || end > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                reason: format!("range {start}..{end} invalid for {n} columns"),
            });
        }
        let src = self.value(a).data();
        let out = (0..m)
            .flat_map(|i| src[i * n + start..i * n + end].iter().copied())
            .collect();
        self.push(&[m, end - start], out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(&[m, total], out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(&[1], vec![s], Op::Sum(a))
    }

    /// Scalar node whose value and gradient with respect to `input` were
    /// computed outside the tape (e.g. by a dynamic-programming recursion).
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var, TensorError> {
        if grad.len() != self.value(input).len() {
            return Err(TensorError::InvalidArgument {
                op: "external",
                reason: format!(
                    "gradient has {} entries, input has {}",
                    grad.len(),
                    self.value(input).len()
                ),
            });
        }
        self.push(&[1], vec![value], Op::External { input, grad })
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        let flip = fault::active();
        for idx in (0..=loss.0).rev() {
            let Some(gout) = local[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions = self.input_grads(node, &gout);
            if flip.is_some() && flip == node.op.primitive() {
                for (_, g) in &mut contributions {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, g) in contributions {
                match &mut local[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            local[idx] = Some(gout);
        }
        if self.grads.len() < local.len() {
            self.grads.resize(local.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(local) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, node: &Node, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let ga = matmul_nt(gout, tb.data(), m, n, k);
                let gb = matmul_tn(ta.data(), gout, m, k, n);
                vec![(a, ga), (b, gb)]
            }
            &Op::Transpose(a) => {
                let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = gout[j * m + i];
                    }
                }
                vec![(a, g)]
            }
            &Op::Add(a, b) => vec![(a, gout.to_vec()), (b, gout.to_vec())],
            &Op::AddRow(a, b) => {
                let n = val(b).len();
                let mut gb = vec![0.0; n];
                for row in gout.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                vec![(a, gout.to_vec()), (b, gb)]
            }
            &Op::Scale(a, c) => vec![(a, gout.iter().map(|g| g * c).collect())],
            &Op::Relu(a) => {
                let x = val(a).data();
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(a, g)]
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                let g = gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(a, g)]
            }
            &Op::Swish(a) => {
                let x = val(a).data();
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                vec![(a, g)]
            }
            &Op::Glu(a) => {
                let x = val(a);
                let n = x.last_dim();
                let h = n / 2;
                let mut g = vec![0.0; x.len()];
                for (r, row) in x.data().chunks(n).enumerate() {
                    for i in 0..h {
                        let s = sigmoid(row[h + i]);
                        let go = gout[r * h + i];
                        g[r * n + i] = go * s;
                        g[r * n + h + i] = go * row[i] * s * (1.0 - s);
                    }
                }
                vec![(a, g)]
            }
            &Op::Softmax(a, axis) | &Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let y = node.value.data();
                let (outer, n, inner) = axis_layout(node.value.shape(), axis);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        if log {
                            let total: f64 = (0..n).map(|i| gout[idx(i)]).sum();
                            for i in 0..n {
                                g[idx(i)] = gout[idx(i)] - y[idx(i)].exp() * total;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|i| gout[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                g[idx(i)] = y[idx(i)] * (gout[idx(i)] - dot);
                            }
                        }
                    }
                }
                vec![(a, g)]
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            } => {
                let n = val(*gain).len();
                let gv = val(*gain).data();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (r, (&inv, xh)) in inv_std.iter().zip(xhat.chunks(n)).enumerate() {
                    let go = &gout[r * n..(r + 1) * n];
                    let dxhat: Vec<f64> = (0..n).map(|i| go[i] * gv[i]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                    for i in 0..n {
                        gx[r * n + i] = inv * (dxhat[i] - mean_d - xh[i] * mean_dx);
                        gg[i] += go[i] * xh[i];
                        gb[i] += go[i];
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            &Op::DepthwiseConv(x, kernel) => {
                let (t, c) = (val(x).shape()[0], val(x).shape()[1]);
                let k = val(kernel).shape()[0];
                let (xs, ks) = (val(x).data(), val(kernel).data());
                let half = k / 2;
                let mut gx = vec![0.0; t * c];
                let mut gk = vec![0.0; k * c];
                for tt in 0..t {
                    for kk in 0..k {
                        let Some(src) = (tt + kk).checked_sub(half).filter(|&s| s < t) else {
                            continue;
                        };
                        for ch in 0..c {
                            let go = gout[tt * c + ch];
                            gx[src * c + ch] += ks[kk * c + ch] * go;
                            gk[kk * c + ch] += xs[src * c + ch] * go;
                        }
                    }
                }
                vec![(x, gx), (kernel, gk)]
            }
            &Op::SliceCols(a, start) => {
                let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                let w = node.value.shape()[1];
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + start..i * n + start + w].copy_from_slice(&gout[i * w..(i + 1) * w]);
                }
                vec![(a, g)]
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).shape()[1];
                        let g = (0..m)
                            .flat_map(|i| gout[i * total + offset..i * total + offset + w].iter().copied())
                            .collect();
                        offset += w;
                        (p, g)
                    })
                    .collect()
            }
            &Op::Sum(a) => vec![(a, vec![gout[0]; val(a).len()])],
            Op::External { input, grad } => {
                vec![(*input, grad.iter().map(|g| g * gout[0]).collect())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let z = tape.leaf(t(&[2, 1], &[0.0, 0.0]));
        let c = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(t(&[3], &[1000.0, 0.0, -1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 + 1e-12 && d[2] == 0.0);
    }

    #[test]
    fn softmax_over_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[2] - 0.5).abs() < 1e-15);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_zero_variance_and_symmetry() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let x = tape.leaf(Tensor::full(&[4], 5.0));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let x = tape.leaf(t(&[2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn conv_identity_zero_and_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let impulse = tape.leaf(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
        let y = tape.depthwise_conv1d(x, impulse).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let zero = tape.leaf(Tensor::zeros(&[3, 2]));
        let y = tape.depthwise_conv1d(x, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
        let even = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.depthwise_conv1d(x, even).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = tape.leaf(t(&[1, 4], &[3.0, -2.0, 0.0, 0.0]));
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -1.0]);

        let odd = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(tape.glu(odd).is_err());
    }

    #[test]
    fn backward_sum_and_independent() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2, 2], &[1.0, -3.0, 0.5, 2.0]));
        let q = tape.leaf(t(&[2], &[1.0, 1.0]));
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0; 4]);
        // q never feeds the loss.
        assert!(tape.grad(q).is_none());
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = tape.scale(p, 3.0).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[6.0, 6.0]);
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1], &[2.0]));
        let a = tape.add(p, p).unwrap();
        let b = tape.add(a, p).unwrap();
        tape.backward(b).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1], &[f64::MAX]));
        assert!(matches!(
            tape.scale(p, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn primitive_names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
    }
}
