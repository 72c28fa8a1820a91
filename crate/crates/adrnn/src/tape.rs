//! Dense tensors plus reverse-mode automatic differentiation over a
//! dynamic (define-by-run) tape.
//!
//! Every learnable computation in the crate flows through [`Tape`]. A
//! forward pass records one [`Node`] per operation; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients additively
//! into every `requires_grad` leaf. The tape is consumed by backward:
//! a second call is an error.
//!
//! Recurrent unrolls have per-sample depth under adaptive halting, so
//! the graph must be rebuilt each forward pass; nothing here is cached
//! across passes.
//!
//! Broadcasting is restricted to leading-1 dimensions (a smaller shape
//! may be aligned at the trailing axes, missing leading dims treated
//! as 1). Anything else is a loud shape error.

use std::fmt;
use std::iter::Sum;

use ndarray::{ArrayD, ArrayViewD, IxDyn, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{AdrnnError, Result};

/// Element types the engine supports: f32 for training, f64 for
/// gradient-check suites.
pub trait Scalar:
    Float
    + FromPrimitive
    + ScalarOperand
    + Sum
    + std::ops::AddAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Layer-norm statistics scope: per spatial location over channels, or
/// over the whole (C, H, W) volume per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnScope {
    Channels,
    Chw,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    /// out = a * mul + add, elementwise with scalar constants.
    Affine {
        a: usize,
        mul: T,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    /// [m,k] x [k,n] -> [m,n]
    MatMul {
        a: usize,
        b: usize,
    },
    /// Same-padded stride-1 cross-correlation, odd kernel.
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        scope: LnScope,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        axes: Vec<usize>,
        /// For Max: flat input index feeding each output element.
        argmax: Vec<usize>,
    },
    /// [B,C,H,W] -> [B,C], mean over spatial dims.
    GlobalAvgPool {
        x: usize,
    },
    /// [B,C,H,W] -> [B,C], max over spatial dims, first-index tie-break.
    GlobalMaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    /// x: [B, ...], s: [B]; out[b, ...] = x[b, ...] * s[b].
    ScalePerSample {
        x: usize,
        s: usize,
    },
    /// Mean softplus-stabilized binary cross-entropy against constant-like targets.
    BceLogits {
        logits: usize,
        targets: usize,
    },
    Reshape {
        a: usize,
        from: Vec<usize>,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub value: ArrayD<T>,
    pub grad: Option<ArrayD<T>>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Recording tape for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            grad_enabled: true,
        }
    }

    /// A tape that records values only; every node is treated as a
    /// constant and backward is unavailable. Used by streaming
    /// evaluation where intermediates are discarded step by step.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> TensorRef {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: rg,
            op: if rg { op } else { Op::Leaf },
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Insert a learnable leaf (participates in backward).
    pub fn leaf(&mut self, value: ArrayD<T>) -> TensorRef {
        self.push(value, true, Op::Leaf)
    }

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, value: ArrayD<T>) -> TensorRef {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> TensorRef {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, t: TensorRef) -> &ArrayD<T> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Gradient of a leaf after backward; `None` if absent.
    pub fn grad(&self, t: TensorRef) -> Option<&ArrayD<T>> {
        self.nodes[t.0].grad.as_ref()
    }

    // ---- elementwise ----

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a.0);
        self.push(v, rg, Op::Unary { kind: UnaryKind::Neg, a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let rg = self.rg(a.0);
        self.push(v, rg, Op::Unary { kind: UnaryKind::Sigmoid, a: a.0 })
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let z = T::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > z { x } else { z });
        let rg = self.rg(a.0);
        self.push(v, rg, Op::Unary { kind: UnaryKind::Relu, a: a.0 })
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let rg = self.rg(a.0);
        self.push(v, rg, Op::Unary { kind: UnaryKind::Tanh, a: a.0 })
    }

    /// out = a * mul + add (scalar constants).
    pub fn affine(&mut self, a: TensorRef, mul: T, add: T) -> TensorRef {
        let v = self.nodes[a.0].value.mapv(|x| x * mul + add);
        let rg = self.rg(a.0);
        let _ = add;
        self.push(v, rg, Op::Affine { a: a.0, mul })
    }

    pub fn scale(&mut self, a: TensorRef, c: T) -> TensorRef {
        self.affine(a, c, T::zero())
    }

    /// 1 - a, used for gate complements.
    pub fn one_minus(&mut self, a: TensorRef) -> TensorRef {
        self.affine(a, -T::one(), T::one())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(AdrnnError::ShapeMismatch {
            op: binop_name(kind),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = self.nodes[a.0]
            .value
            .broadcast(IxDyn(&out_shape))
            .expect("broadcast lhs");
        let vb = self.nodes[b.0]
            .value
            .broadcast(IxDyn(&out_shape))
            .expect("broadcast rhs");
        let v = match kind {
            BinKind::Add => &va + &vb,
            BinKind::Sub => &va - &vb,
            BinKind::Mul => &va * &vb,
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, rg, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let from = self.nodes[a.0].value.shape().to_vec();
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(AdrnnError::ShapeMismatch {
                op: "reshape",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.rg(a.0);
        Ok(self.push(v, rg, Op::Reshape { a: a.0, from }))
    }

    // ---- matmul ----

    /// [m,k] x [k,n] -> [m,n]; deterministic k-ascending accumulation.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdrnnError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = matmul_nd(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    // ---- reductions ----

    pub fn reduce(&mut self, kind: ReduceKind, a: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let mut axes: Vec<usize> = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= shape.len() {
                return Err(AdrnnError::InvalidArgument {
                    op: "reduce",
                    msg: format!("axis {ax} out of range for shape {shape:?}"),
                });
            }
            if shape[ax] == 0 {
                return Err(AdrnnError::InvalidArgument {
                    op: "reduce",
                    msg: format!("empty reduction axis {ax} in shape {shape:?}"),
                });
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let (values, argmax) = reduce_forward(kind, &self.nodes[a.0].value, &axes, &out_shape);
        let rg = self.rg(a.0);
        Ok(self.push(
            values,
            rg,
            Op::Reduce {
                kind,
                a: a.0,
                axes,
                argmax,
            },
        ))
    }

    pub fn sum_axes(&mut self, a: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean_axes(&mut self, a: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn max_axes(&mut self, a: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let axes: Vec<usize> = (0..self.nodes[a.0].value.ndim()).collect();
        self.reduce(ReduceKind::Sum, a, &axes).expect("sum_all")
    }

    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let axes: Vec<usize> = (0..self.nodes[a.0].value.ndim()).collect();
        self.reduce(ReduceKind::Mean, a, &axes).expect("mean_all")
    }

    /// x: [B, ...] scaled per sample by s: [B].
    pub fn scale_per_sample(&mut self, x: TensorRef, s: TensorRef) -> Result<TensorRef> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let ss = self.nodes[s.0].value.shape().to_vec();
        if ss.len() != 1 || sx.is_empty() || sx[0] != ss[0] {
            return Err(AdrnnError::ShapeMismatch {
                op: "scale_per_sample",
                lhs: sx,
                rhs: ss,
            });
        }
        let batch = sx[0];
        let per = sx[1..].iter().product::<usize>();
        let mut v = self.nodes[x.0].value.clone();
        {
            let vs = v.as_slice_mut().expect("contiguous");
            let sv = self.nodes[s.0].value.as_slice().expect("contiguous");
            for b in 0..batch {
                let f = sv[b];
                for e in &mut vs[b * per..(b + 1) * per] {
                    *e = *e * f;
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(v, rg, Op::ScalePerSample { x: x.0, s: s.0 }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape: gradients
    /// land on `requires_grad` leaves; intermediate gradients are
    /// dropped as soon as they are propagated.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.consumed {
            return Err(AdrnnError::TapeConsumed);
        }
        if !self.nodes[loss.0].value.shape().is_empty() {
            return Err(AdrnnError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let dy = self.nodes[id].grad.take().expect("grad present");
            let keep_leaf = matches!(self.nodes[id].op, Op::Leaf);
            self.propagate(id, &dy)?;
            if keep_leaf {
                self.nodes[id].grad = Some(dy);
            }
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: usize, contrib: ArrayD<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &contrib,
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, dy: &ArrayD<T>) -> Result<()> {
        // Ops are moved out temporarily so we can borrow values freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let g = match kind {
                    UnaryKind::Neg => dy.mapv(|d| -d),
                    UnaryKind::Sigmoid => {
                        let y = &self.nodes[id].value;
                        let one = T::one();
                        ndarray::Zip::from(dy).and(y).map_collect(|&d, &yv| d * yv * (one - yv))
                    }
                    UnaryKind::Relu => {
                        let y = &self.nodes[id].value;
                        let z = T::zero();
                        ndarray::Zip::from(dy).and(y).map_collect(|&d, &yv| if yv > z { d } else { z })
                    }
                    UnaryKind::Tanh => {
                        let y = &self.nodes[id].value;
                        let one = T::one();
                        ndarray::Zip::from(dy).and(y).map_collect(|&d, &yv| d * (one - yv * yv))
                    }
                };
                self.acc_grad(*a, g);
            }
            Op::Affine { a, mul, .. } => {
                self.acc_grad(*a, dy.mapv(|d| d * *mul));
            }
            Op::Binary { kind, a, b } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                match kind {
                    BinKind::Add => {
                        if self.rg(*a) {
                            self.acc_grad(*a, reduce_to_shape(dy, &sa));
                        }
                        if self.rg(*b) {
                            self.acc_grad(*b, reduce_to_shape(dy, &sb));
                        }
                    }
                    BinKind::Sub => {
                        if self.rg(*a) {
                            self.acc_grad(*a, reduce_to_shape(dy, &sa));
                        }
                        if self.rg(*b) {
                            let neg = dy.mapv(|d| -d);
                            self.acc_grad(*b, reduce_to_shape(&neg, &sb));
                        }
                    }
                    BinKind::Mul => {
                        if self.rg(*a) {
                            let vb = self.nodes[*b].value.broadcast(dy.raw_dim()).expect("bcast");
                            let g = ndarray::Zip::from(dy).and(&vb).map_collect(|&d, &bv| d * bv);
                            self.acc_grad(*a, reduce_to_shape(&g, &sa));
                        }
                        if self.rg(*b) {
                            let va = self.nodes[*a].value.broadcast(dy.raw_dim()).expect("bcast");
                            let g = ndarray::Zip::from(dy).and(&va).map_collect(|&d, &av| d * av);
                            self.acc_grad(*b, reduce_to_shape(&g, &sb));
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let dy2 = dy.view().into_dimensionality::<ndarray::Ix2>().expect("dy 2d");
                if self.rg(*a) {
                    // dA = dY . B^T
                    let bt = transpose2(&self.nodes[*b].value);
                    let g = matmul2(&dy2.to_owned(), &bt);
                    self.acc_grad(*a, g.into_dyn());
                }
                if self.rg(*b) {
                    // dB = A^T . dY
                    let at = transpose2(&self.nodes[*a].value);
                    let g = matmul2(&at, &dy2.to_owned());
                    self.acc_grad(*b, g.into_dyn());
                }
            }
            Op::Conv2d { x, w, b } => {
                self.conv2d_backward(id, *x, *w, *b, dy)?;
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                scope,
                mean,
                inv_std,
            } => {
                self.layer_norm_backward(*x, *gain, *shift, *scope, mean, inv_std, dy)?;
            }
            Op::Reduce { kind, a, axes, argmax } => {
                let in_shape = self.nodes[*a].value.shape().to_vec();
                let g = reduce_backward(*kind, dy, &in_shape, axes, argmax);
                self.acc_grad(*a, g);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = T::from_usize(h * w).map(|n| T::one() / n).expect("hw");
                let mut g = ArrayD::zeros(IxDyn(&xs));
                {
                    let gs = g.as_slice_mut().expect("contig");
                    let dys = dy.as_slice().expect("contig");
                    for bc in 0..bsz * c {
                        let d = dys[bc] * inv;
                        for e in &mut gs[bc * h * w..(bc + 1) * h * w] {
                            *e = d;
                        }
                    }
                }
                self.acc_grad(*x, g);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let mut g = ArrayD::zeros(IxDyn(&xs));
                {
                    let gs = g.as_slice_mut().expect("contig");
                    let dys = dy.as_slice().expect("contig");
                    for (out_i, &in_i) in argmax.iter().enumerate() {
                        gs[in_i] = gs[in_i] + dys[out_i];
                    }
                }
                self.acc_grad(*x, g);
            }
            Op::ScalePerSample { x, s } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                let batch = sx[0];
                let per = sx[1..].iter().product::<usize>();
                let dys = dy.as_slice().expect("contig");
                if self.rg(*x) {
                    let sv = self.nodes[*s].value.as_slice().expect("contig").to_vec();
                    let mut g = ArrayD::zeros(IxDyn(&sx));
                    {
                        let gs = g.as_slice_mut().expect("contig");
                        for b in 0..batch {
                            let f = sv[b];
                            for (ge, de) in gs[b * per..(b + 1) * per]
                                .iter_mut()
                                .zip(&dys[b * per..(b + 1) * per])
                            {
                                *ge = *de * f;
                            }
                        }
                    }
                    self.acc_grad(*x, g);
                }
                if self.rg(*s) {
                    let xv = self.nodes[*x].value.as_slice().expect("contig");
                    let mut g = ArrayD::zeros(IxDyn(&[batch]));
                    {
                        let gs = g.as_slice_mut().expect("contig");
                        for b in 0..batch {
                            let mut acc = T::zero();
                            for (xe, de) in xv[b * per..(b + 1) * per]
                                .iter()
                                .zip(&dys[b * per..(b + 1) * per])
                            {
                                acc = acc + *xe * *de;
                            }
                            gs[b] = acc;
                        }
                    }
                    self.acc_grad(*s, g);
                }
            }
            Op::BceLogits { logits, targets } => {
                let z = &self.nodes[*logits].value;
                let t = &self.nodes[*targets].value;
                let n = T::from_usize(z.len()).expect("len");
                let d = dy.first().copied().expect("scalar");
                let one = T::one();
                let g = ndarray::Zip::from(z)
                    .and(t)
                    .map_collect(|&zv, &tv| d * (one / (one + (-zv).exp()) - tv) / n);
                self.acc_grad(*logits, g);
            }
            Op::Reshape { a, from } => {
                let g = dy
                    .clone()
                    .into_shape_with_order(IxDyn(from))
                    .expect("reshape grad");
                self.acc_grad(*a, g);
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }

    // Implemented in ops.rs (forward lives there too).
    pub(crate) fn node_value(&self, id: usize) -> &ArrayD<T> {
        &self.nodes[id].value
    }

    pub(crate) fn push_node(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> TensorRef {
        self.push(value, requires_grad, op)
    }

    pub(crate) fn node_rg(&self, id: usize) -> bool {
        self.rg(id)
    }

    pub(crate) fn add_grad(&mut self, id: usize, contrib: ArrayD<T>) {
        self.acc_grad(id, contrib)
    }
}

fn binop_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
    }
}

/// Leading-1 broadcast: after stripping leading 1-dims, one shape must
/// be a suffix of the other. Returns the output shape, or None.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let strip = |s: &[usize]| -> Vec<usize> {
        let nz = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        s[nz..].to_vec()
    };
    let (ca, cb) = (strip(a), strip(b));
    if ca.len() >= cb.len() && ca.ends_with(&cb) {
        Some(a.to_vec())
    } else if cb.len() > ca.len() && cb.ends_with(&ca) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sum `dy` down to `shape` (inverse of leading-1 broadcast).
fn reduce_to_shape<T: Scalar>(dy: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if dy.shape() == shape {
        return dy.clone();
    }
    let mut g = dy.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    // Remaining explicit leading 1s.
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            let summed = g.sum_axis(ndarray::Axis(ax));
            g = summed.insert_axis(ndarray::Axis(ax));
        }
    }
    g.into_shape_with_order(IxDyn(shape)).expect("reduce_to_shape")
}

fn reduce_forward<T: Scalar>(
    kind: ReduceKind,
    a: &ArrayD<T>,
    axes: &[usize],
    out_shape: &[usize],
) -> (ArrayD<T>, Vec<usize>) {
    let in_shape = a.shape();
    let out_len: usize = out_shape.iter().product();
    let mut values = vec![T::zero(); out_len];
    let mut argmax = Vec::new();
    let mut counts = 1usize;
    for &ax in axes {
        counts *= in_shape[ax];
    }
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            for (flat, &v) in a.as_slice().expect("contig").iter().enumerate() {
                let o = out_index(flat, in_shape, axes, out_shape);
                values[o] = values[o] + v;
            }
            if kind == ReduceKind::Mean {
                let inv = T::one() / T::from_usize(counts).expect("counts");
                for v in &mut values {
                    *v = *v * inv;
                }
            }
        }
        ReduceKind::Max => {
            argmax = vec![usize::MAX; out_len];
            let mut init = vec![false; out_len];
            for (flat, &v) in a.as_slice().expect("contig").iter().enumerate() {
                let o = out_index(flat, in_shape, axes, out_shape);
                // Strict > keeps the first maximal index on ties.
                if !init[o] || v > values[o] {
                    values[o] = v;
                    argmax[o] = flat;
                    init[o] = true;
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(out_shape), values).expect("reduce shape"),
        argmax,
    )
}

/// Map a flat input index to the flat output index after removing `axes`.
fn out_index(flat: usize, in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; in_shape.len()];
    for i in (0..in_shape.len()).rev() {
        coords[i] = rem % in_shape[i];
        rem /= in_shape[i];
    }
    let mut o = 0usize;
    let mut oi = 0usize;
    for (i, &c) in coords.iter().enumerate() {
        if axes.contains(&i) {
            continue;
        }
        o = o * out_shape[oi] + c;
        oi += 1;
    }
    o
}

fn reduce_backward<T: Scalar>(
    kind: ReduceKind,
    dy: &ArrayD<T>,
    in_shape: &[usize],
    axes: &[usize],
    argmax: &[usize],
) -> ArrayD<T> {
    let mut g = ArrayD::zeros(IxDyn(in_shape));
    let dys = dy.as_slice().expect("contig");
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut counts = 1usize;
            for &ax in axes {
                counts *= in_shape[ax];
            }
            let scale = if kind == ReduceKind::Mean {
                T::one() / T::from_usize(counts).expect("counts")
            } else {
                T::one()
            };
            let out_shape: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            let gs = g.as_slice_mut().expect("contig");
            for (flat, ge) in gs.iter_mut().enumerate() {
                let o = out_index(flat, in_shape, axes, &out_shape);
                *ge = dys[o] * scale;
            }
        }
        ReduceKind::Max => {
            let gs = g.as_slice_mut().expect("contig");
            for (o, &in_i) in argmax.iter().enumerate() {
                gs[in_i] = gs[in_i] + dys[o];
            }
        }
    }
    g
}

// ---- deterministic matmul kernel ----

/// [m,k] x [k,n] with per-element accumulation strictly in ascending-k
/// order, so results are bitwise reproducible and match a naive
/// triple-loop reference.
pub fn matmul2<T: Scalar>(a: &ndarray::Array2<T>, b: &ndarray::Array2<T>) -> ndarray::Array2<T> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dims");
    let mut out = ndarray::Array2::<T>::zeros((m, n));
    matmul_into(
        a.as_slice().expect("a contiguous"),
        b.as_slice().expect("b contiguous"),
        out.as_slice_mut().expect("out contiguous"),
        m,
        k,
        n,
    );
    out
}

/// [m,k] x [k,n] accumulated into a zero-initialized output slice.
pub(crate) fn matmul_into<T: Scalar>(
    a_s: &[T],
    b_s: &[T],
    out_s: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    // Register-tiled microkernel over fixed 4x16 output blocks, with a
    // generic fallback for the row/column tails. Every output element
    // still accumulates strictly in ascending-k order into a single
    // accumulator, so the result stays bitwise identical to the naive
    // triple loop; the tiling only changes which elements advance
    // together.
    const JW: usize = 16;
    const IW: usize = 4;
    let mut j0 = 0;
    while j0 + JW <= n {
        let mut i0 = 0;
        while i0 + IW <= m {
            let mut acc = [[T::zero(); JW]; IW];
            for kk in 0..k {
                let brow = &b_s[kk * n + j0..kk * n + j0 + JW];
                for (di, row) in acc.iter_mut().enumerate() {
                    let aik = a_s[(i0 + di) * k + kk];
                    for jj in 0..JW {
                        row[jj] = row[jj] + aik * brow[jj];
                    }
                }
            }
            for (di, row) in acc.iter().enumerate() {
                out_s[(i0 + di) * n + j0..(i0 + di) * n + j0 + JW].copy_from_slice(row);
            }
            i0 += IW;
        }
        // Row tail, one row at a time.
        while i0 < m {
            let mut acc = [T::zero(); JW];
            for kk in 0..k {
                let brow = &b_s[kk * n + j0..kk * n + j0 + JW];
                let aik = a_s[i0 * k + kk];
                for jj in 0..JW {
                    acc[jj] = acc[jj] + aik * brow[jj];
                }
            }
            out_s[i0 * n + j0..i0 * n + j0 + JW].copy_from_slice(&acc);
            i0 += 1;
        }
        j0 += JW;
    }
    // Column tail, generic width.
    if j0 < n {
        let jw = n - j0;
        for i in 0..m {
            let orow = &mut out_s[i * n + j0..i * n + j0 + jw];
            for kk in 0..k {
                let aik = a_s[i * k + kk];
                let brow = &b_s[kk * n + j0..kk * n + j0 + jw];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + aik * bv;
                }
            }
        }
    }
}

fn matmul_nd<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().expect("a 2d").to_owned();
    let b2 = b.view().into_dimensionality::<ndarray::Ix2>().expect("b 2d").to_owned();
    matmul2(&a2, &b2).into_dyn()
}

fn transpose2<T: Scalar>(a: &ArrayD<T>) -> ndarray::Array2<T> {
    let v = a.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
    let mut out = ndarray::Array2::<T>::zeros((v.ncols(), v.nrows()));
    for ((i, j), &x) in v.indexed_iter() {
        out[(j, i)] = x;
    }
    out
}

/// Finite check over a view; used by callers that enforce the
/// "all values finite after any forward op" invariant at boundaries.
pub fn all_finite<T: Scalar>(v: ArrayViewD<'_, T>) -> bool {
    v.iter().all(|x| x.is_finite())
}
