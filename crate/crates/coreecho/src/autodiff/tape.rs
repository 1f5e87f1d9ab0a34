//! The tape, its recorded nodes, and the backward driver.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

use super::batchnorm::{self, BatchStats, BnRecord};
use super::conv::{self, ConvRecord};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Forward/eval switch for stateful layers (dropout, batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Numeric precision of a run. `F32` keeps f64 storage but rounds the result
/// of every primitive (values and gradient accumulators) through f32,
/// emulating single-precision pipelines while staying deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F64,
    F32,
}

/// Elementwise unary primitives, unified under one node kind.
#[derive(Clone, Copy, Debug)]
pub(crate) enum MapKind {
    Exp,
    Log,
    Abs,
    Sigmoid,
    Gelu,
}

impl MapKind {
    fn name(self) -> &'static str {
        match self {
            MapKind::Exp => "exp",
            MapKind::Log => "log",
            MapKind::Abs => "abs",
            MapKind::Sigmoid => "sigmoid",
            MapKind::Gelu => "gelu",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            MapKind::Exp => x.exp(),
            MapKind::Log => x.ln(),
            MapKind::Abs => x.abs(),
            MapKind::Sigmoid => sigmoid(x),
            MapKind::Gelu => gelu(x),
        }
    }

    /// Derivative given the input x and the already-computed output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            MapKind::Exp => y,
            MapKind::Log => 1.0 / x,
            // Subgradient at 0 defined as 0.
            MapKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            MapKind::Sigmoid => y * (1.0 - y),
            MapKind::Gelu => normal_cdf(x) + x * normal_pdf(x),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via erfc, accurate in both tails.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact erf-based GELU: x * Phi(x).
fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) enum Op {
    Leaf,
    StopGradient,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Matmul { a: usize, b: usize },
    Affine { x: usize, w: usize },
    Map { a: usize, kind: MapKind },
    Sum { a: usize },
    Mean { a: usize },
    LogSumExp { a: usize, axis: usize },
    Gather { a: usize, indices: Vec<usize> },
    StackScalars { parts: Vec<usize> },
    Reshape { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    PairwiseL2 { a: usize },
    Dropout { a: usize, mask: Vec<f64> },
    BatchNorm(Box<BnRecord>),
    Conv3d(Box<ConvRecord>),
    GlobalAvgPool { x: usize },
}

pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    precision: Precision,
    backward_done: bool,
}

/// A recording of a forward computation. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                precision,
                backward_done: false,
            })),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.borrow().precision
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New leaf node holding `value`. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            requires_grad,
        })
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Clear all gradient accumulators so backward can run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for n in inner.nodes.iter_mut() {
            n.grad = None;
        }
        inner.backward_done = false;
    }

    pub(crate) fn push(&self, mut node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        if inner.precision == Precision::F32 {
            node.value.quantize_f32();
        }
        inner.nodes.push(node);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Concatenate scalar vars into a 1-D tensor node.
    pub fn stack_scalars(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Domain {
                op: "stack",
                detail: "empty part list".into(),
            });
        }
        let mut data = Vec::with_capacity(parts.len());
        let mut requires = false;
        {
            let inner = self.inner.borrow();
            for p in parts {
                debug_assert!(Rc::ptr_eq(&self.inner, &p.tape.inner), "cross-tape stack");
                let n = &inner.nodes[p.id];
                if n.value.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "stack",
                        detail: format!("part has shape {:?}, expected scalar", n.value.shape()),
                    });
                }
                data.push(n.value.data()[0]);
                requires |= n.requires_grad;
            }
        }
        Ok(self.push(Node {
            op: Op::StackScalars {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            value: Tensor::from_vec(data),
            grad: None,
            requires_grad: requires,
        }))
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Borrow of the forward value, for large tensors.
    pub fn value_ref(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.inner.borrow(), |inner| {
            &inner.nodes[self.id].value
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient, if this node required one and was reached.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Gradient, with zeros when none was accumulated.
    pub fn grad_or_zeros(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    fn binary(&self, other: &Var, op: &'static str) -> Result<(Tensor, Tensor, bool)> {
        debug_assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars from different tapes"
        );
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        if a.value.shape() != b.value.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", a.value.shape(), b.value.shape()),
            });
        }
        Ok((
            a.value.clone(),
            b.value.clone(),
            a.requires_grad || b.requires_grad,
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let (a, b, rg) = self.binary(other, "add")?;
        let mut out = a;
        for (x, y) in out.data_mut().iter_mut().zip(b.data().iter()) {
            *x += y;
        }
        ensure_finite("add", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Add {
                a: self.id,
                b: other.id,
            },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let (a, b, rg) = self.binary(other, "sub")?;
        let mut out = a;
        for (x, y) in out.data_mut().iter_mut().zip(b.data().iter()) {
            *x -= y;
        }
        ensure_finite("sub", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Sub {
                a: self.id,
                b: other.id,
            },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let (a, b, rg) = self.binary(other, "mul")?;
        let mut out = a;
        for (x, y) in out.data_mut().iter_mut().zip(b.data().iter()) {
            *x *= y;
        }
        ensure_finite("mul", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Mul {
                a: self.id,
                b: other.id,
            },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let out = n.value.map(|v| v * c);
        let rg = n.requires_grad;
        drop(inner);
        ensure_finite("scale", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Scale { a: self.id, c },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// 2-D matrix product: (m x k) . (k x n) -> (m x n).
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        let (ash, bsh) = (a.value.shape(), b.value.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{ash:?} . {bsh:?}"),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = gemm(m, k, n, a.value.data(), b.value.data());
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        let out = Tensor::new(vec![m, n], data)?;
        ensure_finite("matmul", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Matmul {
                a: self.id,
                b: other.id,
            },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Affine map with the augmented-bias convention: x is (batch x in),
    /// w is (out x in+1) whose last column is the bias, result (batch x out).
    pub fn affine(&self, w: &Var) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let xn = &inner.nodes[self.id];
        let wn = &inner.nodes[w.id];
        let (xs, ws) = (xn.value.shape(), wn.value.shape());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] + 1 {
            return Err(Error::ShapeMismatch {
                op: "affine",
                detail: format!("x {xs:?} with w {ws:?} (want out x in+1)"),
            });
        }
        let (batch, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let x = xn.value.data();
        let wd = wn.value.data();
        let mut out = vec![0.0; batch * d_out];
        for b in 0..batch {
            let xr = &x[b * d_in..(b + 1) * d_in];
            let or = &mut out[b * d_out..(b + 1) * d_out];
            for (o, ov) in or.iter_mut().enumerate() {
                let wr = &wd[o * (d_in + 1)..(o + 1) * (d_in + 1)];
                let mut acc = wr[d_in];
                for (xi, wi) in xr.iter().zip(wr[..d_in].iter()) {
                    acc += xi * wi;
                }
                *ov = acc;
            }
        }
        let rg = xn.requires_grad || wn.requires_grad;
        drop(inner);
        let out = Tensor::new(vec![batch, d_out], out)?;
        ensure_finite("affine", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Affine {
                x: self.id,
                w: w.id,
            },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    fn map(&self, kind: MapKind) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if matches!(kind, MapKind::Log) {
            if let Some(v) = n.value.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {v}"),
                });
            }
        }
        let out = n.value.map(|v| kind.apply(v));
        let rg = n.requires_grad;
        drop(inner);
        ensure_finite(kind.name(), &out)?;
        Ok(self.tape.push(Node {
            op: Op::Map { a: self.id, kind },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    pub fn exp(&self) -> Result<Var> {
        self.map(MapKind::Exp)
    }

    pub fn log(&self) -> Result<Var> {
        self.map(MapKind::Log)
    }

    pub fn abs(&self) -> Result<Var> {
        self.map(MapKind::Abs)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.map(MapKind::Sigmoid)
    }

    /// Exact erf-based GELU: x * Phi(x).
    pub fn gelu(&self) -> Result<Var> {
        self.map(MapKind::Gelu)
    }

    pub fn sum(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let s: f64 = n.value.data().iter().sum();
        let rg = n.requires_grad;
        drop(inner);
        let out = Tensor::scalar(s);
        ensure_finite("sum", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Sum { a: self.id },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    pub fn mean(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let s: f64 = n.value.data().iter().sum();
        let len = n.value.len() as f64;
        let rg = n.requires_grad;
        drop(inner);
        let out = Tensor::scalar(s / len);
        ensure_finite("mean", &out)?;
        Ok(self.tape.push(Node {
            op: Op::Mean { a: self.id },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Max-shifted log-sum-exp over one axis; the axis is removed from the
    /// output shape (a 1-D input reduces to a scalar).
    pub fn logsumexp(&self, axis: usize) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let shape = n.value.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "logsumexp",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner_stride) = axis_strides(shape, axis);
        let mut out = vec![0.0; outer * inner_stride];
        let data = n.value.data();
        for oi in 0..outer {
            for ii in 0..inner_stride {
                let base = oi * len * inner_stride + ii;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(data[base + j * inner_stride]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    s += (data[base + j * inner_stride] - m).exp();
                }
                out[oi * inner_stride + ii] = m + s.ln();
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        let rg = n.requires_grad;
        drop(inner);
        let out = Tensor::new(out_shape, out)?;
        ensure_finite("logsumexp", &out)?;
        Ok(self.tape.push(Node {
            op: Op::LogSumExp { a: self.id, axis },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Pick flat indices into a 1-D result. Indices may repeat.
    pub fn gather(&self, indices: &[usize]) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let data = n.value.data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= data.len() {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    detail: format!("index {i} out of range for {} elements", data.len()),
                });
            }
            out.push(data[i]);
        }
        let rg = n.requires_grad;
        drop(inner);
        Ok(self.tape.push(Node {
            op: Op::Gather {
                a: self.id,
                indices: indices.to_vec(),
            },
            value: Tensor::from_vec(out),
            grad: None,
            requires_grad: rg,
        }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let out = n.value.reshaped(shape)?;
        let rg = n.requires_grad;
        drop(inner);
        Ok(self.tape.push(Node {
            op: Op::Reshape { a: self.id },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let out = n.value.map(|v| v.clamp(lo, hi));
        let rg = n.requires_grad;
        drop(inner);
        Ok(self.tape.push(Node {
            op: Op::Clamp {
                a: self.id,
                lo,
                hi,
            },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Pairwise Euclidean distances between rows: (n x d) -> (n x n).
    ///
    /// Uses the Gram-matrix identity with negative radicands clamped to zero;
    /// the naive per-pair loop lives in test oracles.
    pub fn pairwise_l2(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let shape = node.value.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_l2",
                detail: format!("want (n>=2) x d matrix, got {shape:?}"),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let x = node.value.data();
        let mut sq = vec![0.0; n];
        for i in 0..n {
            sq[i] = x[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            for j in (i + 1)..n {
                let xj = &x[j * d..(j + 1) * d];
                let dot: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| a * b).sum();
                let d2 = (sq[i] + sq[j] - 2.0 * dot).max(0.0);
                let dist = d2.sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let rg = node.requires_grad;
        drop(inner);
        let out = Tensor::new(vec![n, n], out)?;
        ensure_finite("pairwise_l2", &out)?;
        Ok(self.tape.push(Node {
            op: Op::PairwiseL2 { a: self.id },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Inverted dropout: train mode zeros entries with probability `p` and
    /// scales survivors by 1/(1-p); eval mode is the identity (no node).
    pub fn dropout(&self, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let mask: Vec<f64> = (0..n.value.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut out = n.value.clone();
        for (v, m) in out.data_mut().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        let rg = n.requires_grad;
        drop(inner);
        Ok(self.tape.push(Node {
            op: Op::Dropout { a: self.id, mask },
            value: out,
            grad: None,
            requires_grad: rg,
        }))
    }

    /// Forward identity that contributes zero gradient to all ancestors.
    pub fn stop_gradient(&self) -> Var {
        let value = self.value();
        self.tape.push(Node {
            op: Op::StopGradient,
            value,
            grad: None,
            requires_grad: false,
        })
    }

    /// Train-mode batch norm over the last (channel) axis. Returns the output
    /// and the batch statistics the caller folds into its running estimates.
    pub fn batch_norm_train(
        &self,
        scale: &Var,
        shift: &Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        batchnorm::forward_train(self, scale, shift, eps)
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &self,
        scale: &Var,
        shift: &Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        batchnorm::forward_eval(self, scale, shift, running_mean, running_var, eps)
    }

    /// 3x3x3 convolution over (batch, frames, height, width, channels) input
    /// with zero padding 1 and the given stride per spatiotemporal axis.
    pub fn conv3d(&self, weight: &Var, stride: [usize; 3]) -> Result<Var> {
        conv::forward(self, weight, stride)
    }

    /// Mean over all spatiotemporal axes: (b, f, h, w, c) -> (b, c).
    pub fn global_avg_pool(&self) -> Result<Var> {
        conv::global_avg_pool(self)
    }

    /// Reverse pass from a scalar root. Errors if the root is not scalar or
    /// backward already ran on this tape without a reset.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let root_shape = inner.nodes[self.id].value.shape().to_vec();
        if !(root_shape.is_empty() || root_shape == [1]) {
            return Err(Error::NonScalarRoot { shape: root_shape });
        }
        inner.backward_done = true;
        let precision = inner.precision;
        let root = self.id;
        let nodes = &mut inner.nodes;
        if nodes[root].requires_grad {
            nodes[root].grad = Some(Tensor::full(&nodes[root].value.shape().to_vec(), 1.0));
        }
        for i in (0..=root).rev() {
            if nodes[i].grad.is_none() || !nodes[i].requires_grad {
                continue;
            }
            let (parents, me) = nodes.split_at_mut(i);
            let node = &me[0];
            let g = node.grad.as_ref().unwrap();
            propagate(node, g, parents, precision)?;
        }
        Ok(())
    }
}

/// (outer, axis length, inner stride) decomposition for axis reductions.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn accumulate(parents: &mut [Node], id: usize, contrib: Tensor, precision: Precision) {
    let p = &mut parents[id];
    if !p.requires_grad {
        return;
    }
    debug_assert_eq!(p.value.shape(), contrib.shape());
    match &mut p.grad {
        Some(g) => g.add_assign(&contrib),
        None => p.grad = Some(contrib),
    }
    if precision == Precision::F32 {
        p.grad.as_mut().unwrap().quantize_f32();
    }
}

fn propagate(node: &Node, g: &Tensor, parents: &mut [Node], precision: Precision) -> Result<()> {
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add { a, b } => {
            accumulate(parents, *a, g.clone(), precision);
            accumulate(parents, *b, g.clone(), precision);
        }
        Op::Sub { a, b } => {
            accumulate(parents, *a, g.clone(), precision);
            accumulate(parents, *b, g.map(|v| -v), precision);
        }
        Op::Mul { a, b } => {
            let mut ca = g.clone();
            for (x, y) in ca.data_mut().iter_mut().zip(parents[*b].value.data()) {
                *x *= y;
            }
            let mut cb = g.clone();
            for (x, y) in cb.data_mut().iter_mut().zip(parents[*a].value.data()) {
                *x *= y;
            }
            accumulate(parents, *a, ca, precision);
            accumulate(parents, *b, cb, precision);
        }
        Op::Scale { a, c } => {
            accumulate(parents, *a, g.map(|v| v * c), precision);
        }
        Op::Matmul { a, b } => {
            let av = &parents[*a].value;
            let bv = &parents[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            // ga = g . b^T
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                let garow = &mut ga[i * k..(i + 1) * k];
                for (p, gav) in garow.iter_mut().enumerate() {
                    let brow = &bv.data()[p * n..(p + 1) * n];
                    *gav = grow.iter().zip(brow.iter()).map(|(x, y)| x * y).sum();
                }
            }
            // gb = a^T . g
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let arow = &av.data()[i * k..(i + 1) * k];
                let grow = &g.data()[i * n..(i + 1) * n];
                for (p, &apv) in arow.iter().enumerate() {
                    if apv == 0.0 {
                        continue;
                    }
                    let gbrow = &mut gb[p * n..(p + 1) * n];
                    for (gbv, gv) in gbrow.iter_mut().zip(grow.iter()) {
                        *gbv += apv * gv;
                    }
                }
            }
            accumulate(parents, *a, Tensor::new(vec![m, k], ga)?, precision);
            accumulate(parents, *b, Tensor::new(vec![k, n], gb)?, precision);
        }
        Op::Affine { x, w } => {
            let xv = &parents[*x].value;
            let wv = &parents[*w].value;
            let (batch, d_in) = (xv.shape()[0], xv.shape()[1]);
            let d_out = wv.shape()[0];
            let mut gx = vec![0.0; batch * d_in];
            let mut gw = vec![0.0; d_out * (d_in + 1)];
            for b in 0..batch {
                let grow = &g.data()[b * d_out..(b + 1) * d_out];
                let xrow = &xv.data()[b * d_in..(b + 1) * d_in];
                let gxrow = &mut gx[b * d_in..(b + 1) * d_in];
                for (o, &go) in grow.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let wrow = &wv.data()[o * (d_in + 1)..(o + 1) * (d_in + 1)];
                    for (gxv, wv_) in gxrow.iter_mut().zip(wrow[..d_in].iter()) {
                        *gxv += go * wv_;
                    }
                    let gwrow = &mut gw[o * (d_in + 1)..(o + 1) * (d_in + 1)];
                    for (gwv, xv_) in gwrow.iter_mut().zip(xrow.iter()) {
                        *gwv += go * xv_;
                    }
                    gwrow[d_in] += go;
                }
            }
            accumulate(parents, *x, Tensor::new(vec![batch, d_in], gx)?, precision);
            accumulate(
                parents,
                *w,
                Tensor::new(vec![d_out, d_in + 1], gw)?,
                precision,
            );
        }
        Op::Map { a, kind } => {
            let xv = &parents[*a].value;
            let mut c = g.clone();
            for ((gv, &x), &y) in c
                .data_mut()
                .iter_mut()
                .zip(xv.data().iter())
                .zip(node.value.data().iter())
            {
                *gv *= kind.derivative(x, y);
            }
            accumulate(parents, *a, c, precision);
        }
        Op::Sum { a } => {
            let shape = parents[*a].value.shape().to_vec();
            accumulate(parents, *a, Tensor::full(&shape, g.item()), precision);
        }
        Op::Mean { a } => {
            let shape = parents[*a].value.shape().to_vec();
            let n: usize = shape.iter().product();
            accumulate(
                parents,
                *a,
                Tensor::full(&shape, g.item() / n as f64),
                precision,
            );
        }
        Op::LogSumExp { a, axis } => {
            let xv = &parents[*a].value;
            let shape = xv.shape().to_vec();
            let (outer, len, inner_stride) = axis_strides(&shape, *axis);
            let mut c = Tensor::zeros(&shape);
            for oi in 0..outer {
                for ii in 0..inner_stride {
                    let base = oi * len * inner_stride + ii;
                    let y = node.value.data()[oi * inner_stride + ii];
                    let go = g.data()[oi * inner_stride + ii];
                    for j in 0..len {
                        let idx = base + j * inner_stride;
                        c.data_mut()[idx] = go * (xv.data()[idx] - y).exp();
                    }
                }
            }
            accumulate(parents, *a, c, precision);
        }
        Op::Gather { a, indices } => {
            let mut c = Tensor::zeros(parents[*a].value.shape());
            for (j, &src) in indices.iter().enumerate() {
                c.data_mut()[src] += g.data()[j];
            }
            accumulate(parents, *a, c, precision);
        }
        Op::StackScalars { parts } => {
            for (j, &p) in parts.iter().enumerate() {
                let shape = parents[p].value.shape().to_vec();
                let mut c = Tensor::zeros(&shape);
                c.data_mut()[0] = g.data()[j];
                accumulate(parents, p, c, precision);
            }
        }
        Op::Reshape { a } => {
            let shape = parents[*a].value.shape().to_vec();
            let c = Tensor::new(shape, g.data().to_vec())?;
            accumulate(parents, *a, c, precision);
        }
        Op::Clamp { a, lo, hi } => {
            let xv = &parents[*a].value;
            let mut c = g.clone();
            for (gv, &x) in c.data_mut().iter_mut().zip(xv.data().iter()) {
                if !(x > *lo && x < *hi) {
                    *gv = 0.0;
                }
            }
            accumulate(parents, *a, c, precision);
        }
        Op::PairwiseL2 { a } => {
            let xv = &parents[*a].value;
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            let x = xv.data();
            let dist = node.value.data();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let dij = dist[i * n + j];
                    if dij == 0.0 {
                        // Coincident rows: distance is non-differentiable,
                        // subgradient 0.
                        continue;
                    }
                    let w = (g.data()[i * n + j] + g.data()[j * n + i]) / dij;
                    if w == 0.0 {
                        continue;
                    }
                    let xi = &x[i * d..(i + 1) * d];
                    let xj = &x[j * d..(j + 1) * d];
                    let gi = &mut gx[i * d..(i + 1) * d];
                    for ((gv, &a_), &b_) in gi.iter_mut().zip(xi.iter()).zip(xj.iter()) {
                        *gv += w * (a_ - b_);
                    }
                }
            }
            accumulate(parents, *a, Tensor::new(vec![n, d], gx)?, precision);
        }
        Op::Dropout { a, mask } => {
            let mut c = g.clone();
            for (gv, m) in c.data_mut().iter_mut().zip(mask.iter()) {
                *gv *= m;
            }
            accumulate(parents, *a, c, precision);
        }
        Op::BatchNorm(rec) => {
            let (gx, gscale, gshift) = batchnorm::backward(rec, g, parents)?;
            accumulate(parents, rec.x, gx, precision);
            accumulate(parents, rec.scale, gscale, precision);
            accumulate(parents, rec.shift, gshift, precision);
        }
        Op::Conv3d(rec) => {
            let (gx, gw) = conv::backward(rec, g, parents)?;
            accumulate(parents, rec.x, gx, precision);
            accumulate(parents, rec.w, gw, precision);
        }
        Op::GlobalAvgPool { x } => {
            let xv = &parents[*x].value;
            let shape = xv.shape().to_vec();
            let (b, c) = (shape[0], shape[4]);
            let positions: usize = shape[1] * shape[2] * shape[3];
            let mut gx = Tensor::zeros(&shape);
            let inv = 1.0 / positions as f64;
            let gd = g.data();
            let gxd = gx.data_mut();
            for bi in 0..b {
                for p in 0..positions {
                    let base = (bi * positions + p) * c;
                    let grow = &gd[bi * c..(bi + 1) * c];
                    for (ci, gv) in grow.iter().enumerate() {
                        gxd[base + ci] += gv * inv;
                    }
                }
            }
            accumulate(parents, *x, gx, precision);
        }
    }
    Ok(())
}

/// Tags for the generic primitive dispatcher, mirroring the engine's public
/// op vocabulary. Useful for building randomized graphs in property tests.
#[derive(Clone, Copy, Debug)]
pub enum PrimitiveTag {
    Add,
    Sub,
    MulElementwise,
    Matmul,
    Scale(f64),
    Exp,
    Log,
    Sum,
    Mean,
    Abs,
    Sigmoid,
    LogSumExpOverAxis(usize),
}

/// Apply a primitive by tag. Unary tags take one input, binary tags two.
pub fn eval_primitive(tag: PrimitiveTag, inputs: &[&Var]) -> Result<Var> {
    let arity = match tag {
        PrimitiveTag::Add
        | PrimitiveTag::Sub
        | PrimitiveTag::MulElementwise
        | PrimitiveTag::Matmul => 2,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::Domain {
            op: "eval_primitive",
            detail: format!("{tag:?} expects {arity} inputs, got {}", inputs.len()),
        });
    }
    match tag {
        PrimitiveTag::Add => inputs[0].add(inputs[1]),
        PrimitiveTag::Sub => inputs[0].sub(inputs[1]),
        PrimitiveTag::MulElementwise => inputs[0].mul(inputs[1]),
        PrimitiveTag::Matmul => inputs[0].matmul(inputs[1]),
        PrimitiveTag::Scale(c) => inputs[0].scale(c),
        PrimitiveTag::Exp => inputs[0].exp(),
        PrimitiveTag::Log => inputs[0].log(),
        PrimitiveTag::Sum => inputs[0].sum(),
        PrimitiveTag::Mean => inputs[0].mean(),
        PrimitiveTag::Abs => inputs[0].abs(),
        PrimitiveTag::Sigmoid => inputs[0].sigmoid(),
        PrimitiveTag::LogSumExpOverAxis(axis) => inputs[0].logsumexp(axis),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::matrix(2, 3, vec![5.0, -1.0, 2.0, 0.5, 7.0, 3.0]).unwrap());
        let y = eye.matmul(&x).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn logsumexp_max_shift_survives_large_inputs() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
        let y = x.logsumexp(0).unwrap();
        assert!(close(y.item(), 1000.0 + 2.0_f64.ln(), 1e-12));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(crate::Error::Domain { .. })));
    }

    #[test]
    fn gelu_matches_high_precision_cdf_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 1.0, -10.0]));
        let y = x.gelu().unwrap();
        let d = y.value();
        assert_eq!(d.data()[0], 0.0);
        // Phi(1) = 0.841344746068543, frozen from the erf(1/sqrt(2)) expansion.
        assert!(close(d.data()[1], 0.8413447460685429, 1e-14));
        // Tail: Phi(-10) = 7.619853024160526e-24; no flush-to-zero, sign kept.
        assert!(d.data()[2] < 0.0);
        assert!(close(d.data()[2], -7.619853024160526e-23, 1e-28));
    }

    #[test]
    fn batch_norm_train_two_sample_hand_case() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let scale = tape.constant(Tensor::from_vec(vec![1.0]));
        let shift = tape.constant(Tensor::from_vec(vec![0.0]));
        let (out, stats) = x.batch_norm_train(&scale, &shift, 1e-5).unwrap();
        // mean 2, population var 1
        let expect = 1.0 / (1.0_f64 + 1e-5).sqrt();
        let d = out.value();
        assert!(close(d.data()[0], -expect, 1e-15));
        assert!(close(d.data()[1], expect, 1e-15));
        assert!(close(stats.mean[0], 2.0, 1e-15));
        assert!(close(stats.var_population[0], 1.0, 1e-15));
        assert!(close(stats.var_unbiased[0], 2.0, 1e-15));
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let scale = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let shift = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let out = x
            .batch_norm_eval(&scale, &shift, &[0.0, 0.0], &[1.0, 1.0], 1e-5)
            .unwrap();
        let k = 1.0 / (1.0_f64 + 1e-5).sqrt();
        for (o, i) in out.value().data().iter().zip(x.value().data().iter()) {
            assert!(close(*o, i * k, 1e-15));
        }
    }

    #[test]
    fn batch_norm_zero_scale_collapses_to_shift() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 1, vec![-4.0, 0.0, 9.0]).unwrap());
        let scale = tape.constant(Tensor::from_vec(vec![0.0]));
        let shift = tape.constant(Tensor::from_vec(vec![0.25]));
        let (out, _) = x.batch_norm_train(&scale, &shift, 1e-5).unwrap();
        assert!(out.value().data().iter().all(|v| close(*v, 0.25, 1e-15)));
    }

    #[test]
    fn batch_norm_train_batch_of_one_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let scale = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let shift = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(x.batch_norm_train(&scale, &shift, 1e-5).is_err());
    }

    #[test]
    fn dropout_eval_and_p_zero_are_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eval = x.dropout(0.4, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval.value(), x.value());
        let p0 = x.dropout(0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(p0.value(), x.value());
        assert!(x.dropout(1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_mask_deterministic_and_keep_fraction_calibrated() {
        // Monte-Carlo oracle: keep fraction over 1e6 draws within 0.6 +/- 0.002
        // for the default head rate 0.4.
        let n = 1_000_000usize;
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], vec![1.0; n]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = x.dropout(0.4, Mode::Train, &mut rng).unwrap();
        let kept = out.value().data().iter().filter(|v| **v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.6).abs() <= 0.002, "keep fraction {frac}");

        // Same seed, same mask.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let out2 = x.dropout(0.4, Mode::Train, &mut rng2).unwrap();
        assert_eq!(out.value(), out2.value());
        // Survivors scaled by 1/(1-p).
        let scaled = out
            .value()
            .data()
            .iter()
            .all(|v| *v == 0.0 || close(*v, 1.0 / 0.6, 1e-15));
        assert!(scaled);
    }

    fn naive_pairwise(x: &Tensor) -> Vec<f64> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = x.data()[i * d + k] - x.data()[j * d + k];
                    s += diff * diff;
                }
                out[i * n + j] = s.sqrt();
            }
        }
        out
    }

    #[test]
    fn pairwise_l2_identical_rows_are_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let d = x.pairwise_l2().unwrap();
        assert!(d.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pairwise_l2_three_four_five() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let d = x.pairwise_l2().unwrap();
        assert!(close(d.value().data()[1], 5.0, 1e-15));
        assert!(close(d.value().data()[2], 5.0, 1e-15));
    }

    #[test]
    fn pairwise_l2_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        let x = Tensor::matrix(6, 8, (0..48).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let d = xv.pairwise_l2().unwrap();
        let oracle = naive_pairwise(&x);
        for (a, b) in d.value().data().iter().zip(oracle.iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, 5.0]), true);
        let y = tape.leaf(Tensor::from_vec(vec![-1.0, 4.0]), true);
        let loss = x.mul(&y).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), y.value().data());
        assert_eq!(y.grad().unwrap().data(), x.value().data());
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]), true);
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(
            loss.backward(),
            Err(crate::Error::BackwardAlreadyRun)
        ));
        tape.reset_grads();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = x.scale(2.0).unwrap();
        assert!(matches!(
            y.backward(),
            Err(crate::Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn stop_gradient_passes_value_and_blocks_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5, -0.5]), true);
        let sg = x.stop_gradient();
        assert_eq!(sg.value(), x.value());
        let loss = sg.sum().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
        assert_eq!(x.grad_or_zeros().data(), &[0.0, 0.0]);
        assert_eq!(sg.grad_or_zeros().data(), &[0.0, 0.0]);
    }

    #[test]
    fn stop_gradient_split_path_counts_single_path_only() {
        // loss = sum(x + sg(x)) -> grad_x = ones, not 2*ones
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let loss = x.add(&x.stop_gradient()).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn duplicated_input_sums_per_path_gradients() {
        // loss = sum(x * x) -> grad = 2x via two product paths
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0, -1.0]), true);
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn f32_precision_rounds_forward_values() {
        let tape = Tape::with_precision(Precision::F32);
        let x = tape.constant(Tensor::from_vec(vec![0.1, 0.2]));
        let y = x.add(&x).unwrap();
        assert_eq!(y.value().data()[0], (0.1f32 + 0.1f32) as f64);
        assert_eq!(y.value().data()[1], (0.2f32 + 0.2f32) as f64);
    }

    #[test]
    fn conv3d_identity_kernel_recovers_input() {
        // Single input channel, kernel with 1 at the center tap, stride 1.
        let tape = Tape::new();
        let x = Tensor::new(vec![1, 3, 4, 4, 1], (0..48).map(|i| i as f64).collect()).unwrap();
        let xv = tape.constant(x.clone());
        let mut wdata = vec![0.0; 27];
        wdata[13] = 1.0; // center of the 3x3x3 kernel
        let w = tape.constant(Tensor::new(vec![1, 3, 3, 3, 1], wdata).unwrap());
        let y = xv.conv3d(&w, [1, 1, 1]).unwrap();
        assert_eq!(y.value().shape(), &[1, 3, 4, 4, 1]);
        for (a, b) in y.value().data().iter().zip(x.data().iter()) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn global_avg_pool_means_positions() {
        let tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap(),
        );
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.value().shape(), &[1, 2]);
        assert!(close(y.value().data()[0], 2.0, 1e-15));
        assert!(close(y.value().data()[1], 20.0, 1e-15));
    }

    #[test]
    fn grad_check_quadratic_is_exact_to_roundoff() {
        let params = vec![(
            "x".to_string(),
            Tensor::from_vec(vec![0.3, -1.2, 2.0]),
        )];
        let report = grad_check(
            |_tape, vars| vars[0].mul(&vars[0])?.sum()?.scale(0.5),
            &params,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }

    #[test]
    fn grad_check_gelu_chain() {
        let params = vec![(
            "x".to_string(),
            Tensor::from_vec(vec![0.4, -0.9, 1.7, -2.3]),
        )];
        let report = grad_check(
            |_tape, vars| vars[0].gelu()?.gelu()?.sum(),
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }

    #[test]
    fn grad_check_rejects_nondeterministic_builder() {
        use std::cell::Cell;
        let calls = Cell::new(0.0_f64);
        let params = vec![("x".to_string(), Tensor::from_vec(vec![1.0]))];
        let err = grad_check(
            |tape, vars| {
                calls.set(calls.get() + 1.0);
                let noise = tape.constant_scalar(calls.get());
                vars[0].sum()?.add(&noise)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"));
    }
}
