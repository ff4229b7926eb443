//! Axis reductions and cumulative scans.
//!
//! Sums are pairwise (error grows as `O(log n)` rather than `O(n)`), running
//! sums are Neumaier-compensated and running products are chunked so that the
//! rounding error of a prefix product of length `n` grows with
//! `chunk + n / chunk` instead of `n`. Every lane is reduced in a fixed order,
//! so results are bitwise independent of the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, PAR_GRAIN};

const PAIRWISE_BASE: usize = 32;
const CUMPROD_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    CumSum,
    CumProd,
}

impl ReduceOp {
    /// Cumulative ops keep the reduced axis.
    pub fn keeps_axis(self) -> bool {
        matches!(self, Self::CumSum | Self::CumProd)
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum<T: Element>(xs: &[T]) -> T {
    strided_pairwise(xs, 0, 1, xs.len())
}

fn strided_pairwise<T: Element>(data: &[T], start: usize, stride: usize, n: usize) -> T {
    if n <= PAIRWISE_BASE {
        let mut acc = T::zero();
        for k in 0..n {
            acc = acc + data[start + k * stride];
        }
        return acc;
    }
    let half = n / 2;
    strided_pairwise(data, start, stride, half) + strided_pairwise(data, start + half * stride, stride, n - half)
}

/// Neumaier-compensated inclusive prefix sum written into `out`.
fn compensated_cumsum<T: Element>(data: &[T], start: usize, stride: usize, n: usize, out: &mut [T]) {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for k in 0..n {
        let x = data[start + k * stride];
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp = comp + ((sum - t) + x);
        } else {
            comp = comp + ((x - t) + sum);
        }
        sum = t;
        out[start + k * stride] = sum + comp;
    }
}

/// Inclusive prefix product: local products inside fixed chunks, then one
/// multiplication by the running product of all preceding chunks.
fn chunked_cumprod<T: Element>(data: &[T], start: usize, stride: usize, n: usize, out: &mut [T]) {
    let mut carry = T::one();
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + CUMPROD_CHUNK).min(n);
        let mut local = T::one();
        for k in k0..k1 {
            local = local * data[start + k * stride];
            out[start + k * stride] = carry * local;
        }
        carry = carry * local;
        k0 = k1;
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Reduces `a` along `axis`. Sum/Mean/Max drop the axis; CumSum/CumProd keep it.
pub fn reduce<T: Element>(op: ReduceOp, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(a.shape(), axis)?;
    let src = a.data();
    if op.keeps_axis() {
        let mut out = vec![T::zero(); a.len()];
        // Lanes of one outer block never overlap another block.
        let block = (n * inner).max(1);
        out.par_chunks_mut(block).enumerate().for_each(|(o, chunk)| {
            let base = o * n * inner;
            let src_block = &src[base..base + n * inner];
            for i in 0..inner {
                match op {
                    ReduceOp::CumSum => compensated_cumsum(src_block, i, inner, n, chunk),
                    ReduceOp::CumProd => chunked_cumprod(src_block, i, inner, n, chunk),
                    _ => unreachable!(),
                }
            }
        });
        let name = if op == ReduceOp::CumSum { "cumsum" } else { "cumprod" };
        return Tensor::from_op(a.shape().to_vec(), out, name);
    }

    if n == 0 && matches!(op, ReduceOp::Max | ReduceOp::Mean) {
        return Err(Error::EmptyReduction);
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    let mut out = vec![T::zero(); outer * inner];
    let denom = T::lit(n as f64);
    out.par_iter_mut()
        .with_min_len((PAR_GRAIN / n.max(1)).max(1))
        .enumerate()
        .for_each(|(j, o)| {
            let (ob, i) = (j / inner.max(1), j % inner.max(1));
            let start = ob * n * inner + i;
            *o = match op {
                ReduceOp::Sum => strided_pairwise(src, start, inner, n),
                ReduceOp::Mean => strided_pairwise(src, start, inner, n) / denom,
                ReduceOp::Max => (0..n)
                    .map(|k| src[start + k * inner])
                    .fold(T::neg_infinity(), T::max),
                _ => unreachable!(),
            };
        });
    let name = match op {
        ReduceOp::Sum => "sum",
        ReduceOp::Mean => "mean",
        _ => "max",
    };
    Tensor::from_op(shape, out, name)
}
