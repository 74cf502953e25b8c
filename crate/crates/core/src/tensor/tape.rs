//! Reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops are
//! appended in execution order and [`Tape::backward`] replays them in exact
//! reverse, accumulating gradients into the `grad` slot of each leaf that
//! requires it. Intermediate gradients are transient.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Conv2dGeom};
use super::value::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// The differentiable kernel set.
///
/// Shape rules (row-major everywhere):
/// - `MatMul`: `op(a)` is `m x k`, `op(b)` is `k x n`, output `m x n`.
/// - `Conv2d` / `StridedConv2d`: input `[B, H, W, C]`, weight
///   `[k*k*C, C_out]` ordered `(ky, kx, c)`, output `[B, H_out, W_out, C_out]`.
///   `StridedConv2d { stride: s }` is the non-overlapping `s x s` patch
///   convolution with stride `s` and no padding.
/// - `Conv1d`: input `[T, C]`, weight `[k*C, C_out]`, output `[T + 2p - k + 1, C_out]`.
/// - `Add`, `Sub`, `Mul`: equal shapes, or a 1-D right operand matching the
///   last axis of the left (broadcast over rows).
/// - `MaxOverAxis`, `MeanOverAxis`: drop the axis (a rank-1 input yields `[1]`).
/// - `LogSoftmax`: normalizes along the last axis.
/// - `GatherRows`, `ScatterAddRows`, `ScatterMaxRows`: operate on the first
///   axis; scatter-max writes zero to rows that receive nothing.
/// - `CtcLoss`: input `[T, V+1]` log-probabilities, output `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul {
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    StridedConv2d {
        stride: usize,
    },
    Conv1d {
        kernel: usize,
        pad: usize,
    },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    MaxOverAxis {
        axis: usize,
    },
    MeanOverAxis {
        axis: usize,
    },
    SumAll,
    LogSoftmax,
    Concat {
        axis: usize,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    ScatterAddRows {
        indices: Vec<usize>,
        rows: usize,
    },
    ScatterMaxRows {
        indices: Vec<usize>,
        rows: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    CtcLoss {
        target: Vec<usize>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::StridedConv2d { .. } => "strided_conv2d",
            OpKind::Conv1d { .. } => "conv1d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::MaxOverAxis { .. } => "max_over_axis",
            OpKind::MeanOverAxis { .. } => "mean_over_axis",
            OpKind::SumAll => "sum_all",
            OpKind::LogSoftmax => "softmax_log",
            OpKind::Concat { .. } => "concat",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::ScatterAddRows { .. } => "scatter_add_rows",
            OpKind::ScatterMaxRows { .. } => "scatter_max_rows",
            OpKind::Reshape { .. } => "reshape",
            OpKind::CtcLoss { .. } => "ctc_loss",
        }
    }
}

/// Values saved during the forward pass for use in backward.
#[derive(Debug)]
enum Saved {
    None,
    Cols(Vec<f64>),
    ArgIdx(Vec<usize>),
    Grad(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<usize>,
    saved: Saved,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward accumulates into its grad slot.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            needs_grad,
        })
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::invalid(
                "tape",
                "variable does not belong to this tape",
            ));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.value(v).grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Executes `kind` on `inputs` and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let (out, saved) = forward(&kind, &vals)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let needs_grad = idx.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node {
            value: out,
            op: Some(kind),
            inputs: idx,
            saved,
            needs_grad,
        }))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[li].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(op) = &node.op else {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].needs_grad)
                .collect();
            let in_grads = backward_op(op, &ins, &node.value, &node.saved, &g, &wants);
            let targets = node.inputs.clone();
            for (j, gi) in targets.into_iter().zip(in_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            OpKind::MatMul {
                trans_a: false,
                trans_b: false,
            },
            &[a, b],
        )
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_a, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumAll, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MeanOverAxis { axis }, &[a])
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MaxOverAxis { axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::GatherRows { indices }, &[a])
    }

    pub fn scatter_add_rows(&mut self, a: Var, indices: Vec<usize>, rows: usize) -> Result<Var> {
        self.apply(OpKind::ScatterAddRows { indices, rows }, &[a])
    }

    pub fn scatter_max_rows(&mut self, a: Var, indices: Vec<usize>, rows: usize) -> Result<Var> {
        self.apply(OpKind::ScatterMaxRows { indices, rows }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.apply(
            OpKind::Conv2d {
                kernel,
                stride,
                pad,
            },
            &[x, w],
        )
    }

    pub fn strided_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(OpKind::StridedConv2d { stride }, &[x, w])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, pad: usize) -> Result<Var> {
        self.apply(OpKind::Conv1d { kernel, pad }, &[x, w])
    }

    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::CtcLoss {
                target: target.to_vec(),
            },
            &[log_probs],
        )
    }
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(
            op,
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::invalid(op, format!("expected a 2-D tensor, got {:?}", t.shape())))
}

/// How the right operand of a binary op lines up with the left.
fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    let last = *a.shape().last().unwrap();
    if b.shape().len() == 1 && b.shape()[0] == last {
        return Ok(true);
    }
    Err(Error::shape(op, a.shape(), b.shape()))
}

fn conv_geom(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGeom> {
    let [b, h, wd, c] = x.shape() else {
        return Err(Error::invalid(
            op,
            format!("input must be [B, H, W, C], got {:?}", x.shape()),
        ));
    };
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid(op, "kernel and stride must be at least 1"));
    }
    if h + 2 * pad < kernel || wd + 2 * pad < kernel {
        return Err(Error::invalid(
            op,
            format!("kernel {kernel} larger than padded input {:?}", x.shape()),
        ));
    }
    let (wr, _) = dims2(op, w)?;
    if wr != kernel * kernel * c {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    Ok(Conv2dGeom {
        batch: *b,
        h: *h,
        w: *wd,
        c: *c,
        kernel,
        stride,
        pad,
    })
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn row_len(t: &Tensor) -> usize {
    t.shape()[1..].iter().product()
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let name = kind.name();
    match kind {
        OpKind::MatMul { trans_a, trans_b } => {
            arity(name, inputs, 2)?;
            let (ar, ac) = dims2(name, inputs[0])?;
            let (br, bc) = dims2(name, inputs[1])?;
            let (m, k) = if *trans_a { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if *trans_b { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(Error::shape(name, inputs[0].shape(), inputs[1].shape()));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                inputs[0].data(),
                *trans_a,
                inputs[1].data(),
                *trans_b,
                0.0,
                &mut out,
            );
            Ok((Tensor::from_parts(vec![m, n], out), Saved::None))
        }
        OpKind::Conv2d {
            kernel,
            stride,
            pad,
        } => {
            arity(name, inputs, 2)?;
            let g = conv_geom(name, inputs[0], inputs[1], *kernel, *stride, *pad)?;
            conv2d_forward(&g, inputs[0], inputs[1])
        }
        OpKind::StridedConv2d { stride } => {
            arity(name, inputs, 2)?;
            let g = conv_geom(name, inputs[0], inputs[1], *stride, *stride, 0)?;
            if g.h % stride != 0 || g.w % stride != 0 {
                return Err(Error::invalid(
                    name,
                    format!("extents {}x{} not divisible by stride {stride}", g.h, g.w),
                ));
            }
            conv2d_forward(&g, inputs[0], inputs[1])
        }
        OpKind::Conv1d { kernel, pad } => {
            arity(name, inputs, 2)?;
            let (t, c) = dims2(name, inputs[0])?;
            let (wr, co) = dims2(name, inputs[1])?;
            if *kernel == 0 || wr != kernel * c || t + 2 * pad < *kernel {
                return Err(Error::shape(name, inputs[0].shape(), inputs[1].shape()));
            }
            let out_t = t + 2 * pad - kernel + 1;
            let cols = kernels::im2col_1d(inputs[0].data(), t, c, *kernel, *pad);
            let mut out = vec![0.0; out_t * co];
            kernels::gemm(
                out_t,
                wr,
                co,
                1.0,
                &cols,
                false,
                inputs[1].data(),
                false,
                0.0,
                &mut out,
            );
            Ok((Tensor::from_parts(vec![out_t, co], out), Saved::Cols(cols)))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            arity(name, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let bcast = broadcast_kind(name, a, b)?;
            let bl = b.len();
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let out: Vec<f64> = if bcast {
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % bl]))
                    .collect()
            } else {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            };
            Ok((Tensor::from_parts(a.shape().to_vec(), out), Saved::None))
        }
        OpKind::Scale(c) => {
            arity(name, inputs, 1)?;
            let out = inputs[0].data().iter().map(|x| x * c).collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out),
                Saved::None,
            ))
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp => {
            arity(name, inputs, 1)?;
            let f: fn(f64) -> f64 = match kind {
                OpKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
                OpKind::Sigmoid => sigmoid,
                OpKind::Exp => f64::exp,
                _ => f64::tanh,
            };
            let out = inputs[0].data().iter().map(|&x| f(x)).collect();
            Ok((
                Tensor::from_parts(inputs[0].shape().to_vec(), out),
                Saved::None,
            ))
        }
        OpKind::MaxOverAxis { axis } | OpKind::MeanOverAxis { axis } => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            if *axis >= x.shape().len() {
                return Err(Error::invalid(
                    name,
                    format!("axis {axis} out of range for {:?}", x.shape()),
                ));
            }
            let (outer, ext, inner) = axis_split(x.shape(), *axis);
            let shape = reduced_shape(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            if matches!(kind, OpKind::MeanOverAxis { .. }) {
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += x.data()[base + i];
                        }
                    }
                }
                let inv = 1.0 / ext as f64;
                out.iter_mut().for_each(|v| *v *= inv);
                Ok((Tensor::from_parts(shape, out), Saved::None))
            } else {
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = x.data()[o * ext * inner + i];
                        let mut bi = 0;
                        for e in 1..ext {
                            let v = x.data()[(o * ext + e) * inner + i];
                            // strict comparison keeps the first maximal index
                            if v > best {
                                best = v;
                                bi = e;
                            }
                        }
                        out[o * inner + i] = best;
                        arg[o * inner + i] = bi;
                    }
                }
                Ok((Tensor::from_parts(shape, out), Saved::ArgIdx(arg)))
            }
        }
        OpKind::SumAll => {
            arity(name, inputs, 1)?;
            Ok((Tensor::scalar(inputs[0].data().iter().sum()), Saved::None))
        }
        OpKind::LogSoftmax => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            let c = *x.shape().last().unwrap();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let lse = kernels::log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::None))
        }
        OpKind::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::invalid(name, "no inputs"));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(Error::invalid(
                    name,
                    format!("axis {axis} out of range for {first:?}"),
                ));
            }
            for t in &inputs[1..] {
                let s = t.shape();
                let ok = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(d, (a, b))| d == *axis || a == b);
                if !ok {
                    return Err(Error::shape(name, first, s));
                }
            }
            let (outer, _, inner) = axis_split(first, *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut shape = first.to_vec();
            shape[*axis] = total;
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::GatherRows { indices } => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            let rows = x.shape()[0];
            if indices.is_empty() {
                return Err(Error::invalid(name, "empty index list"));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::invalid(
                    name,
                    format!("row {bad} out of range for {:?}", x.shape()),
                ));
            }
            let rl = row_len(x);
            let mut out = Vec::with_capacity(indices.len() * rl);
            for &i in indices {
                out.extend_from_slice(&x.data()[i * rl..(i + 1) * rl]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Ok((Tensor::from_parts(shape, out), Saved::None))
        }
        OpKind::ScatterAddRows { indices, rows } | OpKind::ScatterMaxRows { indices, rows } => {
            arity(name, inputs, 1)?;
            let x = inputs[0];
            if x.shape()[0] != indices.len() {
                return Err(Error::invalid(
                    name,
                    format!("{} index entries for input {:?}", indices.len(), x.shape()),
                ));
            }
            if *rows == 0 {
                return Err(Error::invalid(name, "output must have at least one row"));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= *rows) {
                return Err(Error::invalid(
                    name,
                    format!("target row {bad} out of range for {rows} rows"),
                ));
            }
            let rl = row_len(x);
            let mut shape = x.shape().to_vec();
            shape[0] = *rows;
            let mut out = vec![0.0; rows * rl];
            if matches!(kind, OpKind::ScatterAddRows { .. }) {
                for (src, &dst) in indices.iter().enumerate() {
                    for c in 0..rl {
                        out[dst * rl + c] += x.data()[src * rl + c];
                    }
                }
                Ok((Tensor::from_parts(shape, out), Saved::None))
            } else {
                let mut arg = vec![usize::MAX; rows * rl];
                for (src, &dst) in indices.iter().enumerate() {
                    for c in 0..rl {
                        let v = x.data()[src * rl + c];
                        let slot = dst * rl + c;
                        if arg[slot] == usize::MAX || v > out[slot] {
                            out[slot] = v;
                            arg[slot] = src;
                        }
                    }
                }
                Ok((Tensor::from_parts(shape, out), Saved::ArgIdx(arg)))
            }
        }
        OpKind::Reshape { shape } => {
            arity(name, inputs, 1)?;
            Ok((inputs[0].reshaped(shape)?, Saved::None))
        }
        OpKind::CtcLoss { target } => {
            arity(name, inputs, 1)?;
            let (t, v) = dims2(name, inputs[0])?;
            let (loss, grad) = crate::ctc::ctc_forward_backward(inputs[0].data(), t, v, target)?;
            Ok((Tensor::scalar(loss), Saved::Grad(grad)))
        }
    }
}

fn conv2d_forward(g: &Conv2dGeom, x: &Tensor, w: &Tensor) -> Result<(Tensor, Saved)> {
    let (wr, co) = w.dims2().expect("validated by conv_geom");
    let cols = kernels::im2col(x.data(), g);
    let rows = g.out_positions();
    let mut out = vec![0.0; rows * co];
    kernels::gemm(
        rows,
        wr,
        co,
        1.0,
        &cols,
        false,
        w.data(),
        false,
        0.0,
        &mut out,
    );
    let shape = vec![g.batch, g.out_h(), g.out_w(), co];
    Ok((Tensor::from_parts(shape, out), Saved::Cols(cols)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op(
    kind: &OpKind,
    ins: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match kind {
        OpKind::MatMul { trans_a, trans_b } => {
            let (a, b) = (ins[0], ins[1]);
            let (ar, ac) = a.dims2().unwrap();
            let (br, bc) = b.dims2().unwrap();
            let (m, k) = if *trans_a { (ac, ar) } else { (ar, ac) };
            let n = if *trans_b { br } else { bc };
            let da = wants[0].then(|| {
                let mut da = vec![0.0; a.len()];
                if *trans_a {
                    // dA (k x m) = op(B) (k x n) * dC^T (n x m)
                    kernels::gemm(k, n, m, 1.0, b.data(), *trans_b, g, true, 0.0, &mut da);
                } else {
                    // dA (m x k) = dC (m x n) * op(B)^T (n x k)
                    kernels::gemm(m, n, k, 1.0, g, false, b.data(), !*trans_b, 0.0, &mut da);
                }
                da
            });
            let db = wants[1].then(|| {
                let mut db = vec![0.0; b.len()];
                if *trans_b {
                    // dB (n x k) = dC^T (n x m) * op(A) (m x k)
                    kernels::gemm(n, m, k, 1.0, g, true, a.data(), *trans_a, 0.0, &mut db);
                } else {
                    // dB (k x n) = op(A)^T (k x m) * dC (m x n)
                    kernels::gemm(k, m, n, 1.0, a.data(), !*trans_a, g, false, 0.0, &mut db);
                }
                db
            });
            vec![da, db]
        }
        OpKind::Conv2d {
            kernel,
            stride,
            pad,
        } => conv2d_backward(ins, saved, g, wants, *kernel, *stride, *pad),
        OpKind::StridedConv2d { stride } => {
            conv2d_backward(ins, saved, g, wants, *stride, *stride, 0)
        }
        OpKind::Conv1d { kernel, pad } => {
            let (x, w) = (ins[0], ins[1]);
            let (t, c) = x.dims2().unwrap();
            let (wr, co) = w.dims2().unwrap();
            let out_t = out.shape()[0];
            let Saved::Cols(cols) = saved else {
                unreachable!()
            };
            let dx = wants[0].then(|| {
                let mut dcols = vec![0.0; cols.len()];
                kernels::gemm(
                    out_t,
                    co,
                    wr,
                    1.0,
                    g,
                    false,
                    w.data(),
                    true,
                    0.0,
                    &mut dcols,
                );
                let mut dx = vec![0.0; x.len()];
                kernels::col2im_1d(&dcols, t, c, *kernel, *pad, &mut dx);
                dx
            });
            let dw = wants[1].then(|| {
                let mut dw = vec![0.0; w.len()];
                kernels::gemm(wr, out_t, co, 1.0, cols, true, g, false, 0.0, &mut dw);
                dw
            });
            vec![dx, dw]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let bcast = a.shape() != b.shape();
            let bl = b.len();
            let da = wants[0].then(|| match kind {
                OpKind::Mul if bcast => g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * b.data()[i % bl])
                    .collect(),
                OpKind::Mul => g.iter().zip(b.data()).map(|(gi, bi)| gi * bi).collect(),
                _ => g.to_vec(),
            });
            let db = wants[1].then(|| {
                let per: Vec<f64> = match kind {
                    OpKind::Add => g.to_vec(),
                    OpKind::Sub => g.iter().map(|v| -v).collect(),
                    _ => g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect(),
                };
                if bcast {
                    let mut acc = vec![0.0; bl];
                    for (i, v) in per.iter().enumerate() {
                        acc[i % bl] += v;
                    }
                    acc
                } else {
                    per
                }
            });
            vec![da, db]
        }
        OpKind::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        OpKind::Relu => vec![Some(
            g.iter()
                .zip(ins[0].data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect(),
        )],
        OpKind::Sigmoid => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(gi, y)| gi * y * (1.0 - y))
                .collect(),
        )],
        OpKind::Tanh => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(gi, y)| gi * (1.0 - y * y))
                .collect(),
        )],
        OpKind::Exp => vec![Some(
            g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect(),
        )],
        OpKind::MaxOverAxis { axis } | OpKind::MeanOverAxis { axis } => {
            let x = ins[0];
            let (outer, ext, inner) = axis_split(x.shape(), *axis);
            let mut dx = vec![0.0; x.len()];
            match saved {
                Saved::ArgIdx(arg) => {
                    for o in 0..outer {
                        for i in 0..inner {
                            let e = arg[o * inner + i];
                            dx[(o * ext + e) * inner + i] += g[o * inner + i];
                        }
                    }
                }
                _ => {
                    let inv = 1.0 / ext as f64;
                    for o in 0..outer {
                        for e in 0..ext {
                            for i in 0..inner {
                                dx[(o * ext + e) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        OpKind::SumAll => vec![Some(vec![g[0]; ins[0].len()])],
        OpKind::LogSoftmax => {
            let c = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.len()];
            for ((dr, yr), gr) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let s: f64 = gr.iter().sum();
                for j in 0..c {
                    dr[j] = gr[j] - yr[j].exp() * s;
                }
            }
            vec![Some(dx)]
        }
        OpKind::Concat { axis } => {
            let total = out.shape()[*axis];
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(ins.len());
            for (t, want) in ins.iter().zip(wants) {
                let ext = t.shape()[*axis];
                if *want {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + ext * inner]);
                    }
                    res.push(Some(d));
                } else {
                    res.push(None);
                }
                offset += ext;
            }
            res
        }
        OpKind::GatherRows { indices } => {
            let x = ins[0];
            let rl = row_len(x);
            let mut dx = vec![0.0; x.len()];
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..rl {
                    dx[i * rl + c] += g[k * rl + c];
                }
            }
            vec![Some(dx)]
        }
        OpKind::ScatterAddRows { indices, .. } => {
            let x = ins[0];
            let rl = row_len(x);
            let mut dx = Vec::with_capacity(x.len());
            for &dst in indices {
                dx.extend_from_slice(&g[dst * rl..(dst + 1) * rl]);
            }
            vec![Some(dx)]
        }
        OpKind::ScatterMaxRows { .. } => {
            let x = ins[0];
            let Saved::ArgIdx(arg) = saved else {
                unreachable!()
            };
            let rl = row_len(x);
            let mut dx = vec![0.0; x.len()];
            for (slot, &src) in arg.iter().enumerate() {
                if src != usize::MAX {
                    dx[src * rl + slot % rl] += g[slot];
                }
            }
            vec![Some(dx)]
        }
        OpKind::Reshape { .. } => vec![Some(g.to_vec())],
        OpKind::CtcLoss { .. } => {
            let Saved::Grad(gr) = saved else {
                unreachable!()
            };
            vec![Some(gr.iter().map(|v| v * g[0]).collect())]
        }
    }
}

fn conv2d_backward(
    ins: &[&Tensor],
    saved: &Saved,
    g: &[f64],
    wants: &[bool],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<Option<Vec<f64>>> {
    let (x, w) = (ins[0], ins[1]);
    let s = x.shape();
    let geom = Conv2dGeom {
        batch: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        kernel,
        stride,
        pad,
    };
    let Saved::Cols(cols) = saved else {
        unreachable!()
    };
    let (wr, co) = w.dims2().unwrap();
    let rows = geom.out_positions();
    let dx = wants[0].then(|| {
        let mut dcols = vec![0.0; cols.len()];
        kernels::gemm(rows, co, wr, 1.0, g, false, w.data(), true, 0.0, &mut dcols);
        let mut dx = vec![0.0; x.len()];
        kernels::col2im(&dcols, &geom, &mut dx);
        dx
    });
    let dw = wants[1].then(|| {
        let mut dw = vec![0.0; w.len()];
        kernels::gemm(wr, rows, co, 1.0, cols, true, g, false, 0.0, &mut dw);
        dw
    });
    vec![dx, dw]
}
