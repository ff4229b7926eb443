//! Reverse-mode gradients over tensor-valued primitives.
//!
//! A [`Var`] wraps an immutable [`Tensor`] together with the primitive that
//! produced it. Operations on vars record their inputs only when at least one
//! input requires a gradient, so inference on constants keeps no history and
//! frees intermediates as soon as they go out of scope.
//!
//! [`GradTape::record`] walks the recorded graph from a scalar output into a
//! topologically ordered node list; [`GradTape::backward`] replays it in
//! reverse, visiting each node once, and returns one gradient per leaf. The
//! graph is immutable, so replaying the same tape twice gives bitwise-equal
//! gradients.
//!
//! ```
//! use gmfuse_core::autograd::Var;
//! use gmfuse_core::Tensor;
//!
//! let x = Var::param(Tensor::scalar(3.0).unwrap());
//! let y = x.mul(&x).unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(&x).data(), &[6.0]);
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::reduce::{axis_split, reduce, ReduceOp};
use crate::spatial;
use crate::ssm::scan;
use crate::tensor::{elementwise, sigmoid, BroadcastMap, Element, ElementwiseOp, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
enum Op<T> {
    Binary(ElementwiseOp),
    Unary(ElementwiseOp),
    Scale(T),
    Reduce(ReduceOp, usize),
    SumAll,
    MatMul,
    Transpose,
    Reshape,
    GatherRows(Arc<[usize]>),
    Softmax,
    Concat(Vec<usize>),
    Slice { start: usize, len: usize },
    LinearScan { chunk: usize },
    DepthwiseConv,
    AvgPool(usize),
    Upsample(usize),
    SpaceToDepth(usize),
    Bilinear,
}

struct Node<T: Element> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
    inputs: Vec<Var<T>>,
}

/// A tensor-valued node of the gradient graph.
pub struct Var<T: Element = f64>(Arc<Node<T>>);

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Element> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op: None,
            inputs: Vec::new(),
        }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A constant sharing this var's storage.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn record(value: Tensor<T>, op: Op<T>, inputs: Vec<Var<T>>) -> Self {
        let requires_grad = inputs.iter().any(Var::requires_grad);
        Self(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op: requires_grad.then_some(op),
            inputs: if requires_grad { inputs } else { Vec::new() },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    fn binary(&self, op: ElementwiseOp, rhs: &Self) -> Result<Self> {
        let v = elementwise(op, self.value(), Some(rhs.value()))?;
        Ok(Self::record(v, Op::Binary(op), vec![self.clone(), rhs.clone()]))
    }

    fn unary(&self, op: ElementwiseOp) -> Result<Self> {
        let v = elementwise(op, self.value(), None)?;
        Ok(Self::record(v, Op::Unary(op), vec![self.clone()]))
    }

    /// `self + rhs`, broadcasting `rhs` into this shape.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.binary(ElementwiseOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.binary(ElementwiseOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.binary(ElementwiseOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Self) -> Result<Self> {
        self.binary(ElementwiseOp::Div, rhs)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, rhs: &Self) -> Result<Self> {
        self.binary(ElementwiseOp::Max, rhs)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(ElementwiseOp::Exp)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(ElementwiseOp::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Self> {
        self.unary(ElementwiseOp::Softplus)
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary(ElementwiseOp::Tanh)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Self> {
        self.mul(&self.sigmoid()?)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        let v = self.value().map("scale", |x| x * factor)?;
        Ok(Self::record(v, Op::Scale(factor), vec![self.clone()]))
    }

    fn reduce_op(&self, op: ReduceOp, axis: usize) -> Result<Self> {
        let v = reduce(op, self.value(), axis)?;
        Ok(Self::record(v, Op::Reduce(op, axis), vec![self.clone()]))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_op(ReduceOp::Sum, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_op(ReduceOp::Mean, axis)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_op(ReduceOp::Max, axis)
    }

    pub fn cumsum(&self, axis: usize) -> Result<Self> {
        self.reduce_op(ReduceOp::CumSum, axis)
    }

    pub fn cumprod(&self, axis: usize) -> Result<Self> {
        self.reduce_op(ReduceOp::CumProd, axis)
    }

    /// Sum of all elements as a rank-0 var.
    pub fn sum_all(&self) -> Result<Self> {
        let total = crate::reduce::pairwise_sum(self.value().data());
        let v = Tensor::from_op(Vec::<usize>::new(), vec![total], "sum_all")?;
        Ok(Self::record(v, Op::SumAll, vec![self.clone()]))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let v = self.value().matmul(rhs.value())?;
        Ok(Self::record(v, Op::MatMul, vec![self.clone(), rhs.clone()]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let v = self.value().transpose2()?;
        Ok(Self::record(v, Op::Transpose, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(Self::record(v, Op::Reshape, vec![self.clone()]))
    }

    /// Selects rows of the leading axis: `out[i] = self[index[i]]`.
    pub fn gather_rows(&self, index: Arc<[usize]>) -> Result<Self> {
        let v = gather_rows(self.value(), &index)?;
        Ok(Self::record(v, Op::GatherRows(index), vec![self.clone()]))
    }

    pub fn softmax(&self) -> Result<Self> {
        let v = spatial::softmax_last(self.value())?;
        Ok(Self::record(v, Op::Softmax, vec![self.clone()]))
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let v = slice_last(self.value(), start, len)?;
        Ok(Self::record(v, Op::Slice { start, len }, vec![self.clone()]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(parts: &[Self]) -> Result<Self> {
        let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        let v = concat_last(&values)?;
        let sizes = values.iter().map(|t| *t.shape().last().unwrap_or(&1)).collect();
        Ok(Self::record(v, Op::Concat(sizes), parts.to_vec()))
    }

    /// Backpropagates from this scalar var.
    pub fn backward(&self) -> Result<Gradients<T>> {
        GradTape::record(self).backward()
    }
}

/// Gated linear recurrence `h_t = gates_t * h_{t-1} + drive_t` over `[L, D]`.
pub fn linear_scan<T: Element>(gates: &Var<T>, drive: &Var<T>, chunk: usize) -> Result<Var<T>> {
    let v = scan::scan_chunked(gates.value(), drive.value(), chunk)?;
    Ok(Var::record(v, Op::LinearScan { chunk }, vec![gates.clone(), drive.clone()]))
}

pub fn depthwise_conv3x3<T: Element>(x: &Var<T>, kernel: &Var<T>) -> Result<Var<T>> {
    let v = spatial::depthwise_conv3x3(x.value(), kernel.value())?;
    Ok(Var::record(v, Op::DepthwiseConv, vec![x.clone(), kernel.clone()]))
}

pub fn avg_pool<T: Element>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    let v = spatial::avg_pool(x.value(), factor)?;
    Ok(Var::record(v, Op::AvgPool(factor), vec![x.clone()]))
}

pub fn upsample_nearest<T: Element>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    let v = spatial::upsample_nearest(x.value(), factor)?;
    Ok(Var::record(v, Op::Upsample(factor), vec![x.clone()]))
}

pub fn space_to_depth<T: Element>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    let v = spatial::space_to_depth(x.value(), factor)?;
    Ok(Var::record(v, Op::SpaceToDepth(factor), vec![x.clone()]))
}

pub fn bilinear_sample<T: Element>(feat: &Var<T>, coords: &Var<T>) -> Result<Var<T>> {
    let v = spatial::bilinear_sample(feat.value(), coords.value())?;
    Ok(Var::record(v, Op::Bilinear, vec![feat.clone(), coords.clone()]))
}

fn gather_rows<T: Element>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let rows = *x.shape().first().ok_or_else(|| Error::Rank {
        op: "gather_rows",
        expected: 1,
        shape: vec![],
    })?;
    let width = x.len() / rows.max(1);
    let src = x.data();
    let mut out = Vec::with_capacity(index.len() * width);
    for &r in index {
        if r >= rows {
            return Err(Error::Invalid(format!("gather_rows: row {r} out of range for {rows} rows")));
        }
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = index.len();
    Ok(Tensor::from_parts(shape, out))
}

fn slice_last<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| Error::Rank {
        op: "slice_last",
        expected: 1,
        shape: vec![],
    })?;
    if start + len > n {
        return Err(Error::Invalid(format!("slice_last: [{start}, {}) exceeds {n}", start + len)));
    }
    let src = x.data();
    let rows = x.len() / n.max(1);
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&src[r * n + start..r * n + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, out))
}

fn concat_last<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `grad` over broadcast positions down to `shape`.
fn unbroadcast<T: Element>(grad: &[T], out_shape: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    let map = BroadcastMap::new(out_shape, shape, "unbroadcast")?;
    if let BroadcastMap::Same = map {
        return Tensor::from_op(shape.to_vec(), grad.to_vec(), "unbroadcast");
    }
    let mut acc = vec![T::zero(); crate::tensor::numel(shape)];
    for (i, &g) in grad.iter().enumerate() {
        let j = map.source(i);
        acc[j] = acc[j] + g;
    }
    Tensor::from_op(shape.to_vec(), acc, "unbroadcast")
}

/// Vector-Jacobian products of one recorded node: one entry per input.
fn vjp<T: Element>(op: &Op<T>, inputs: &[Var<T>], out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let x = inputs[0].value();
    let gd = g.data();
    let map_grad = |name: &'static str, f: &dyn Fn(usize) -> T| -> Result<Tensor<T>> {
        Tensor::from_op(x.shape().to_vec(), (0..x.len()).map(f).collect(), name)
    };
    Ok(match op {
        Op::Binary(kind) => {
            let b = inputs[1].value();
            let map = BroadcastMap::new(x.shape(), b.shape(), "vjp")?;
            let (xs, bs, os) = (x.data(), b.data(), out.data());
            let bv = |i: usize| bs[map.source(i)];
            let (ga, gb): (Vec<T>, Vec<T>) = (0..x.len())
                .map(|i| match kind {
                    ElementwiseOp::Add => (gd[i], gd[i]),
                    ElementwiseOp::Sub => (gd[i], -gd[i]),
                    ElementwiseOp::Mul => (gd[i] * bv(i), gd[i] * xs[i]),
                    ElementwiseOp::Div => (gd[i] / bv(i), -gd[i] * os[i] / bv(i)),
                    ElementwiseOp::Max => {
                        if xs[i] >= bv(i) {
                            (gd[i], T::zero())
                        } else {
                            (T::zero(), gd[i])
                        }
                    }
                    _ => unreachable!(),
                })
                .unzip();
            vec![
                Tensor::from_op(x.shape().to_vec(), ga, "vjp_binary")?,
                unbroadcast(&gb, x.shape(), b.shape())?,
            ]
        }
        Op::Unary(kind) => {
            let (xs, os) = (x.data(), out.data());
            let one = T::one();
            vec![map_grad("vjp_unary", &|i| {
                gd[i]
                    * match kind {
                        ElementwiseOp::Exp => os[i],
                        ElementwiseOp::Sigmoid => os[i] * (one - os[i]),
                        ElementwiseOp::Softplus => sigmoid(xs[i]),
                        ElementwiseOp::Tanh => one - os[i] * os[i],
                        _ => unreachable!(),
                    }
            })?]
        }
        Op::Scale(c) => vec![map_grad("vjp_scale", &|i| gd[i] * *c)?],
        Op::Reduce(kind, axis) => {
            let (outer, n, inner) = axis_split(x.shape(), *axis)?;
            let lane = |i: usize| (i / (n * inner), (i / inner) % n, i % inner);
            match kind {
                ReduceOp::Sum => vec![map_grad("vjp_sum", &|i| {
                    let (o, _, k) = lane(i);
                    gd[o * inner + k]
                })?],
                ReduceOp::Mean => {
                    let inv = T::one() / T::lit(n as f64);
                    vec![map_grad("vjp_mean", &|i| {
                        let (o, _, k) = lane(i);
                        gd[o * inner + k] * inv
                    })?]
                }
                ReduceOp::Max => {
                    let xs = x.data();
                    let mut gx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let target = out.data()[o * inner + k];
                            if let Some(p) = (0..n).find(|&p| xs[(o * n + p) * inner + k] == target) {
                                gx[(o * n + p) * inner + k] = gd[o * inner + k];
                            }
                        }
                    }
                    vec![Tensor::from_op(x.shape().to_vec(), gx, "vjp_max")?]
                }
                ReduceOp::CumSum => {
                    let mut gx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let mut acc = T::zero();
                            for p in (0..n).rev() {
                                let idx = (o * n + p) * inner + k;
                                acc = acc + gd[idx];
                                gx[idx] = acc;
                            }
                        }
                    }
                    vec![Tensor::from_op(x.shape().to_vec(), gx, "vjp_cumsum")?]
                }
                ReduceOp::CumProd => {
                    // d/dx_i = P_{i-1} * R_i with R_i = g_i + x_{i+1} R_{i+1}:
                    // no division, so zeros in x are harmless.
                    let (xs, os) = (x.data(), out.data());
                    let mut gx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |p: usize| (o * n + p) * inner + k;
                            let mut r = T::zero();
                            for p in (0..n).rev() {
                                r = if p + 1 < n { gd[idx(p)] + xs[idx(p + 1)] * r } else { gd[idx(p)] };
                                let before = if p == 0 { T::one() } else { os[idx(p - 1)] };
                                gx[idx(p)] = before * r;
                            }
                        }
                    }
                    vec![Tensor::from_op(x.shape().to_vec(), gx, "vjp_cumprod")?]
                }
            }
        }
        Op::SumAll => vec![Tensor::full(x.shape().to_vec(), gd[0])],
        Op::MatMul => {
            let b = inputs[1].value();
            vec![g.matmul(&b.transpose2()?)?, x.transpose2()?.matmul(g)?]
        }
        Op::Transpose => vec![g.transpose2()?],
        Op::Reshape => vec![g.reshape(x.shape().to_vec())?],
        Op::GatherRows(index) => {
            let width = x.len() / x.shape()[0].max(1);
            let mut gx = vec![T::zero(); x.len()];
            for (i, &r) in index.iter().enumerate() {
                for k in 0..width {
                    gx[r * width + k] = gx[r * width + k] + gd[i * width + k];
                }
            }
            vec![Tensor::from_op(x.shape().to_vec(), gx, "vjp_gather")?]
        }
        Op::Softmax => vec![spatial::softmax_last_backward(out, g)?],
        Op::Concat(sizes) => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for &w in sizes {
                grads.push(slice_last(g, start, w)?);
                start += w;
            }
            grads
        }
        Op::Slice { start, len } => {
            let n = *x.shape().last().unwrap();
            let mut gx = vec![T::zero(); x.len()];
            for r in 0..x.len() / n.max(1) {
                gx[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            vec![Tensor::from_parts(x.shape().to_vec(), gx)]
        }
        Op::LinearScan { chunk } => {
            let (ga, gu) = scan::scan_backward(x, out, g, *chunk)?;
            vec![ga, gu]
        }
        Op::DepthwiseConv => {
            let (gx, gk) = spatial::depthwise_conv3x3_backward(x, inputs[1].value(), g)?;
            vec![gx, gk]
        }
        Op::AvgPool(k) => vec![spatial::avg_pool_backward(x.shape(), *k, g)?],
        Op::Upsample(k) => vec![spatial::upsample_nearest_backward(g, *k)?],
        Op::SpaceToDepth(k) => vec![spatial::depth_to_space(g, *k)?],
        Op::Bilinear => {
            let (gf, gc) = spatial::bilinear_sample_backward(x, inputs[1].value(), g)?;
            vec![gf, gc]
        }
    })
}

/// Topologically ordered record of the graph feeding one output.
pub struct GradTape<T: Element = f64> {
    nodes: Vec<Var<T>>,
}

impl<T: Element> GradTape<T> {
    /// Collects every node reachable from `output` that carries a gradient,
    /// inputs before the nodes that consume them.
    pub fn record(output: &Var<T>) -> Self {
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        if !output.requires_grad() {
            return Self { nodes };
        }
        // Iterative post-order DFS.
        let mut stack = vec![(output.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                nodes.push(var);
                continue;
            }
            if !seen.insert(var.id()) {
                continue;
            }
            stack.push((var.clone(), true));
            for input in var.0.inputs.iter().rev() {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ids in replay order (output first).
    pub fn replay_order(&self) -> Vec<u64> {
        self.nodes.iter().rev().map(Var::id).collect()
    }

    /// Reverse replay from the recorded output, which must hold one element.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let Some(output) = self.nodes.last() else {
            return Ok(Gradients { grads: HashMap::new() });
        };
        if output.value().len() != 1 {
            return Err(Error::NotScalar(output.shape().to_vec()));
        }
        let mut adjoints: HashMap<u64, Tensor<T>> = HashMap::new();
        adjoints.insert(output.id(), Tensor::ones(output.shape().to_vec()));
        let mut leaves = HashMap::new();
        for var in self.nodes.iter().rev() {
            let Some(g) = adjoints.remove(&var.id()) else {
                continue;
            };
            let Some(op) = &var.0.op else {
                leaves.insert(var.id(), g);
                continue;
            };
            let inputs = &var.0.inputs;
            let grads = vjp(op, inputs, var.value(), &g)?;
            for (input, gi) in inputs.iter().zip(grads) {
                if !input.requires_grad() {
                    continue;
                }
                match adjoints.get_mut(&input.id()) {
                    Some(acc) => *acc = elementwise(ElementwiseOp::Add, acc, Some(&gi))?,
                    None => {
                        adjoints.insert(input.id(), gi);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of one scalar output with respect to its traced leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f64> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    /// Gradient for `var`, exactly zero when the output does not depend on it.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn square_derivative() {
        let x = Var::param(scalar(3.0));
        let g = x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[6.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let x = Var::param(scalar(0.0));
        let g = x.sigmoid().unwrap().backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.25]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let x = Var::param(scalar(2.0));
        let unused = Var::param(Tensor::ones(vec![3]));
        let g = x.exp().unwrap().backward().unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.wrt(&unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Var::param(Tensor::<f64>::ones(vec![2]));
        assert_eq!(x.exp().unwrap().backward().unwrap_err(), Error::NotScalar(vec![2]));
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = (x*x) + (x*x) with the product node reused
        let x = Var::param(scalar(1.5));
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap();
        let tape = GradTape::record(&y);
        let order = tape.replay_order();
        let unique: HashSet<_> = order.iter().collect();
        assert_eq!(unique.len(), order.len());
        assert_eq!(order.len(), 3);
        assert_eq!(tape.backward().unwrap().wrt(&x).data(), &[6.0]);
    }

    #[test]
    fn replay_is_bitwise_stable() {
        let x = Var::param(Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap());
        let w = Var::constant(Tensor::new(vec![4], vec![1.1, 0.2, -0.5, 3.0]).unwrap());
        let y = x.softplus().unwrap().mul(&w).unwrap().cumprod(0).unwrap().sum_all().unwrap();
        let tape = GradTape::record(&y);
        let a = tape.backward().unwrap().wrt(&x);
        let b = tape.backward().unwrap().wrt(&x);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn constants_keep_no_history() {
        let a = Var::constant(Tensor::<f64>::ones(vec![2]));
        let b = a.exp().unwrap().add(&a).unwrap();
        assert!(b.is_leaf() && !b.requires_grad());
        assert!(GradTape::record(&b.sum_all().unwrap()).is_empty());
    }
}
