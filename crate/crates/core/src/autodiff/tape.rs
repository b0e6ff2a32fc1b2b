//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every value produced during a forward pass is appended to a [`Tape`] as a
//! node; nodes refer to their inputs by [`Var`] handles, which always point to
//! earlier nodes, so record order is a topological order. [`Tape::backward`]
//! walks the record in exact reverse order and accumulates gradients into the
//! nodes that require them.

use crate::autodiff::tensor::{
    broadcast_offsets, broadcast_shape, matmul_at_acc, matmul_bt_acc, Tensor,
};
use crate::error::{DagamError, Result};

/// Arguments of `log` are clamped below at this value.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Exp,
    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// The pointwise operator family; binary kinds broadcast over trailing
/// dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Relu,
    Tanh,
    Exp,
    Log,
    Mul,
    Add,
    Sub,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
    Sum,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Scale(Var, f64),
    Reduce {
        x: Var,
        kind: ReduceKind,
        axis: usize,
        // for Max: flat input offset that won each output element
        winners: Vec<usize>,
    },
    SumAll(Var),
    SoftmaxRows(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    GradReverse {
        x: Var,
        lambda: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Clamp { x, .. }
            | Op::Scale(x, _)
            | Op::Reduce { x, .. }
            | Op::SumAll(x)
            | Op::SoftmaxRows(x)
            | Op::GatherRows { x, .. }
            | Op::Reshape(x)
            | Op::GradReverse { x, .. } => vec![*x],
            Op::Concat(xs) | Op::StackRows(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Ordered record of a forward computation.
///
/// A tape is owned by a single forward/backward pass; it is `Send` so whole
/// runs can move between threads.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of `v`, present after a backward pass that reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Drop every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Dispatch for the whole pointwise family.
    pub fn elementwise(
        &mut self,
        kind: ElementwiseKind,
        x: Var,
        other: Option<Var>,
    ) -> Result<Var> {
        let need_other = || {
            other.ok_or_else(|| DagamError::Contract(format!("{kind:?} needs a second operand")))
        };
        match kind {
            ElementwiseKind::Relu => Ok(self.unary(UnaryKind::Relu, x)),
            ElementwiseKind::Tanh => Ok(self.unary(UnaryKind::Tanh, x)),
            ElementwiseKind::Exp => Ok(self.unary(UnaryKind::Exp, x)),
            ElementwiseKind::Log => Ok(self.unary(UnaryKind::Log, x)),
            ElementwiseKind::Clamp { lo, hi } => self.clamp(x, lo, hi),
            ElementwiseKind::Add => self.binary(BinaryKind::Add, x, need_other()?),
            ElementwiseKind::Sub => self.binary(BinaryKind::Sub, x, need_other()?),
            ElementwiseKind::Mul => self.binary(BinaryKind::Mul, x, need_other()?),
        }
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |v| if v > 0.0 { v } else { 0.0 },
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => |v| v.max(LOG_FLOOR).ln(),
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(DagamError::Contract(format!("clamp bounds [{lo}, {hi}]")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.push(out, Op::Clamp { x, lo, hi }))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            DagamError::dim(format!(
                "cannot broadcast {:?} with {:?}",
                va.shape(),
                vb.shape()
            ))
        })?;
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let oa = broadcast_offsets(va.shape(), &shape);
            let ob = broadcast_offsets(vb.shape(), &shape);
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Reduce along `axis`, removing it from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(DagamError::dim(format!(
                "reduction axis {axis} out of range for {shape:?}"
            )));
        }
        let extent = shape[axis];
        if extent == 0 {
            return Err(DagamError::Degenerate(format!("axis {axis} is empty")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let mut winners = Vec::new();
        if kind == ReduceKind::Max {
            winners = vec![0; outer * inner];
        }
        let data = v.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..extent).map(|e| data[at(e)]).sum();
                        out[slot] = if kind == ReduceKind::Mean {
                            s / extent as f64
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        // strict comparison keeps the first maximal element
                        let mut best = at(0);
                        for e in 1..extent {
                            if data[at(e)] > data[best] {
                                best = at(e);
                            }
                        }
                        out[slot] = data[best];
                        winners[slot] = best;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.push(
            out,
            Op::Reduce {
                x,
                kind,
                axis,
                winners,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of a matrix, computed with the row maximum subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2()?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = v.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Select rows of a matrix by index.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(index)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DagamError::Degenerate("concat of nothing".into()));
        }
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 1 {
                return Err(DagamError::dim(format!(
                    "concat expects vectors, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(xs.to_vec())))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(DagamError::Degenerate("stack of nothing".into()));
        }
        let width = self.value(xs[0]).numel();
        let mut data = Vec::with_capacity(width * xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 1 || v.numel() != width {
                return Err(DagamError::dim(format!(
                    "stack_rows expects vectors of length {width}, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![xs.len(), width], data);
        Ok(self.push(out, Op::StackRows(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Identity forward; the backward pass multiplies the upstream gradient
    /// by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::GradReverse { x, lambda })
    }

    /// Backpropagate from a single-element `loss`.
    ///
    /// Gradients are added to whatever each node already holds, so calling
    /// this twice without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(DagamError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = work[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut work);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // zero-initialised slot for input `v`
        fn slot<'a>(work: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            work[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    matmul_bt_acc(g, vb.data(), slot(work, nodes, *a), m, n, k);
                }
                if wants(*b) {
                    matmul_at_acc(va.data(), g, slot(work, nodes, *b), m, k, n);
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let out_shape = node.value.shape();
                let oa = broadcast_offsets(va.shape(), out_shape);
                let ob = broadcast_offsets(vb.shape(), out_shape);
                if wants(*a) {
                    let ga = slot(work, nodes, *a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[oa[i]] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * vb.data()[ob[i]],
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(work, nodes, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ob[i]] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * va.data()[oa[i]],
                        };
                    }
                }
            }
            Op::Unary(kind, x) => {
                if !wants(*x) {
                    return;
                }
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                let gx = slot(work, nodes, *x);
                for i in 0..g.len() {
                    gx[i] += g[i]
                        * match kind {
                            UnaryKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                            UnaryKind::Exp => yv[i],
                            UnaryKind::Log => {
                                if xv[i] >= LOG_FLOOR {
                                    1.0 / xv[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
            Op::Clamp { x, lo, hi } => {
                if !wants(*x) {
                    return;
                }
                let xv = nodes[x.0].value.data();
                let gx = slot(work, nodes, *x);
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let gx = slot(work, nodes, *x);
                    for (a, &gi) in gx.iter_mut().zip(g) {
                        *a += c * gi;
                    }
                }
            }
            Op::Reduce {
                x,
                kind,
                axis,
                winners,
            } => {
                if !wants(*x) {
                    return;
                }
                let shape = nodes[x.0].value.shape();
                let extent = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let gx = slot(work, nodes, *x);
                match kind {
                    ReduceKind::Max => {
                        for (slot_i, &w) in winners.iter().enumerate() {
                            gx[w] += g[slot_i];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let f = if *kind == ReduceKind::Mean {
                            1.0 / extent as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for e in 0..extent {
                                for i in 0..inner {
                                    gx[(o * extent + e) * inner + i] += f * g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    for a in slot(work, nodes, *x).iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if !wants(*x) {
                    return;
                }
                let y = &node.value;
                let cols = y.shape()[1];
                let gx = slot(work, nodes, *x);
                for r in 0..y.shape()[0] {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if !wants(*x) {
                    return;
                }
                let cols = nodes[x.0].value.shape()[1];
                let gx = slot(work, nodes, *x);
                for (i, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        gx[src * cols + c] += g[i * cols + c];
                    }
                }
            }
            Op::Concat(xs) | Op::StackRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x.0].value.numel();
                    if wants(x) {
                        let gx = slot(work, nodes, x);
                        for (a, &gi) in gx.iter_mut().zip(&g[offset..offset + n]) {
                            *a += gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    for (a, &gi) in slot(work, nodes, *x).iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            Op::GradReverse { x, lambda } => {
                if wants(*x) {
                    for (a, &gi) in slot(work, nodes, *x).iter_mut().zip(g) {
                        *a += -lambda * gi;
                    }
                }
            }
        }
    }
}
