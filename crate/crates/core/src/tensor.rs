//! Dense row-major tensors and elementwise arithmetic.
//!
//! A [`Tensor`] is immutable once built; its storage sits behind an `Arc` so
//! clones are cheap and tensors can be shared freely across worker threads.
//! Every constructor that can observe computed values checks them for
//! finiteness, so NaN/Inf never leak silently out of a library operation.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Minimum number of elements handed to one rayon task.
pub(crate) const PAR_GRAIN: usize = 4096;

/// Floating-point scalar usable as tensor storage.
///
/// `f64` is the verification default; `f32` exists for the benchmark path.
pub trait Element:
    Float + Send + Sync + fmt::Debug + fmt::Display + Default + std::iter::Sum + 'static
{
    const NAME: &'static str;

    /// Converts an `f64` literal, rounding to nearest.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Product of the shape entries (1 for a rank-0 shape).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, validating the length and finiteness of `data`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::from_op(shape, data, "construct")
    }

    /// Like [`Tensor::new`] but names the producing operation in errors.
    pub(crate) fn from_op(shape: impl Into<Vec<usize>>, data: Vec<T>, op: &'static str) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite { op, index });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// For operations that only move or select already-finite values.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Panics if `value` is not finite.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        assert!(value.is_finite(), "Tensor::full with non-finite value");
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(Vec::<usize>::new(), vec![value])
    }

    /// Builds a tensor from a function of the flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(f).collect();
        Self::from_op(shape, data, "from_fn")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value at a multi-index. Panics on a rank mismatch or out-of-range index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Reinterprets the storage with a new shape of equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Element>(&self) -> Result<Tensor<U>> {
        Tensor::from_op(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            "cast",
        )
    }

    /// Applies `f` to every element; the result is checked for finiteness.
    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T + Sync) -> Result<Self> {
        let mut out = vec![T::zero(); self.len()];
        let src = self.data();
        out.par_iter_mut()
            .with_min_len(PAR_GRAIN)
            .enumerate()
            .for_each(|(i, o)| *o = f(src[i]));
        Self::from_op(self.shape.clone(), out, op)
    }

    /// Materializes `self` broadcast to `shape` (right-aligned, size-1 axes stretch).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let map = BroadcastMap::new(shape, &self.shape, "broadcast_to")?;
        let src = self.data();
        let data = (0..numel(shape)).map(|i| src[map.source(i)]).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Self> {
        let [rows, cols] = self.dims2("transpose")?;
        let src = self.data();
        let mut out = vec![T::zero(); self.len()];
        out.par_chunks_mut(rows.max(1))
            .enumerate()
            .for_each(|(c, col)| {
                for (r, o) in col.iter_mut().enumerate() {
                    *o = src[r * cols + c];
                }
            });
        Ok(Self::from_parts(vec![cols, rows], out))
    }

    /// Dense `[m, k] x [k, n]` product. Each output row is accumulated in a
    /// fixed order, so results do not depend on the worker count.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![T::zero(); m * n];
        if n > 0 {
            out.par_chunks_mut(n)
                .with_min_len((PAR_GRAIN / (n * k.max(1))).max(1))
                .enumerate()
                .for_each(|(i, row)| {
                    let arow = &a[i * k..(i + 1) * k];
                    for (p, &av) in arow.iter().enumerate() {
                        if av == T::zero() {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, &bv) in row.iter_mut().zip(brow) {
                            *o = *o + av * bv;
                        }
                    }
                });
        }
        Self::from_op(vec![m, n], out, "matmul")
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Dims of a rank-3 tensor, or a rank error naming `op`.
    pub fn dims3(&self, op: &'static str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Index of the first non-finite value, if any.
pub(crate) fn first_non_finite<T: Element>(data: &[T]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

/// Largest elementwise relative error `|a - e| / max(|e|, floor)`.
pub fn max_relative_error<T: Element>(actual: &[T], expected: &[T], floor: f64) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| {
            let (a, e) = (a.as_f64(), e.as_f64());
            (a - e).abs() / e.abs().max(floor)
        })
        .fold(0.0, f64::max)
}

/// Maps flat output indices to flat indices of a broadcast source.
#[derive(Debug, Clone)]
pub(crate) enum BroadcastMap {
    Same,
    /// Source equals a trailing block of the output: `i % len`.
    Tile(usize),
    /// Source equals a leading block, trailing axes stretched: `i / inner`.
    Repeat(usize),
    General {
        out_shape: Vec<usize>,
        src_strides: Vec<usize>,
    },
}

impl BroadcastMap {
    pub(crate) fn new(out: &[usize], src: &[usize], op: &'static str) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: out.to_vec(),
            rhs: src.to_vec(),
        };
        if src.len() > out.len() {
            // Leading unit axes on the source are harmless.
            let extra = src.len() - out.len();
            if src[..extra].iter().any(|&d| d != 1) {
                return Err(mismatch());
            }
            return Self::new(out, &src[extra..], op);
        }
        if out == src {
            return Ok(Self::Same);
        }
        let offset = out.len() - src.len();
        let mut aligned = vec![1; offset];
        aligned.extend_from_slice(src);
        for (&o, &s) in out.iter().zip(&aligned) {
            if s != o && s != 1 {
                return Err(mismatch());
            }
        }
        // Tile: every stretched axis precedes every matching axis.
        let first_match = aligned
            .iter()
            .zip(out)
            .position(|(&s, &o)| s == o && o != 1)
            .unwrap_or(aligned.len());
        if aligned[first_match..]
            .iter()
            .zip(&out[first_match..])
            .all(|(s, o)| s == o)
        {
            return Ok(Self::Tile(numel(src).max(1)));
        }
        // Repeat: every matching axis precedes every stretched axis.
        let last_match = aligned
            .iter()
            .zip(out)
            .rposition(|(&s, &o)| s == o && o != 1)
            .map_or(0, |p| p + 1);
        if aligned[..last_match]
            .iter()
            .zip(&out[..last_match])
            .all(|(s, o)| s == o)
        {
            return Ok(Self::Repeat(numel(&out[last_match..]).max(1)));
        }
        let src_strides = strides(&aligned)
            .into_iter()
            .zip(&aligned)
            .map(|(st, &d)| if d == 1 { 0 } else { st })
            .collect();
        Ok(Self::General {
            out_shape: out.to_vec(),
            src_strides,
        })
    }

    #[inline]
    pub(crate) fn source(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Tile(len) => i % len,
            Self::Repeat(inner) => i / inner,
            Self::General {
                out_shape,
                src_strides,
            } => {
                let mut rem = i;
                let mut j = 0;
                for (d, &dim) in out_shape.iter().enumerate().rev() {
                    j += (rem % dim) * src_strides[d];
                    rem /= dim;
                }
                j
            }
        }
    }
}

/// Elementwise operation tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Exp,
    Sigmoid,
    Softplus,
    Tanh,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div | Self::Max)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Max => "max",
            Self::Exp => "exp",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::Tanh => "tanh",
        }
    }
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn apply_unary<T: Element>(op: ElementwiseOp, x: T) -> T {
    match op {
        ElementwiseOp::Exp => x.exp(),
        ElementwiseOp::Sigmoid => sigmoid(x),
        ElementwiseOp::Softplus => softplus(x),
        ElementwiseOp::Tanh => x.tanh(),
        _ => unreachable!("binary op in unary position"),
    }
}

#[inline]
pub(crate) fn apply_binary<T: Element>(op: ElementwiseOp, a: T, b: T) -> T {
    match op {
        ElementwiseOp::Add => a + b,
        ElementwiseOp::Sub => a - b,
        ElementwiseOp::Mul => a * b,
        ElementwiseOp::Div => a / b,
        ElementwiseOp::Max => a.max(b),
        _ => unreachable!("unary op in binary position"),
    }
}

/// Applies `op` elementwise. Binary ops broadcast `b` into `a`'s shape; the
/// result always has `a`'s shape.
pub fn elementwise<T: Element>(op: ElementwiseOp, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); a.len()];
    let src = a.data();
    match (op.is_binary(), b) {
        (true, Some(b)) => {
            let map = BroadcastMap::new(a.shape(), b.shape(), op.name())?;
            let rhs = b.data();
            out.par_iter_mut()
                .with_min_len(PAR_GRAIN)
                .enumerate()
                .for_each(|(i, o)| *o = apply_binary(op, src[i], rhs[map.source(i)]));
        }
        (false, None) => {
            out.par_iter_mut()
                .with_min_len(PAR_GRAIN)
                .enumerate()
                .for_each(|(i, o)| *o = apply_unary(op, src[i]));
        }
        (true, None) => return Err(Error::Invalid(format!("{} needs two operands", op.name()))),
        (false, Some(_)) => return Err(Error::Invalid(format!("{} takes one operand", op.name()))),
    }
    Tensor::from_op(a.shape().to_vec(), out, op.name())
}
