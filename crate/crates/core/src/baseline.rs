//! Single-layer self-attention baseline with `Q = K = V = x`.
//!
//! Keys are visited in chunks of [`KEY_CHUNK`] with a running max and sum per
//! query row (online softmax), so a chunk stays in cache while a block of
//! [`ROW_BLOCK`] query rows passes over it. Memory is `O(N C)`; no `N × N`
//! buffer exists. Keys are stored channel-major so the inner loops run over
//! contiguous memory with independent lanes.

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

const LANES: usize = 8;
pub const KEY_CHUNK: usize = 1024;
pub const ROW_BLOCK: usize = 64;

/// Exponential of non-positive arguments, as used after max subtraction.
pub trait SoftmaxExp: Element {
    fn exp_nonpositive(x: Self) -> Self;
}

impl SoftmaxExp for f64 {
    fn exp_nonpositive(x: f64) -> f64 {
        x.exp()
    }
}

impl SoftmaxExp for f32 {
    /// Branch-free `exp` for `x <= 0`: Cody-Waite reduction by `ln 2`, a
    /// degree-6 Taylor polynomial, and exponent-field scaling. Relative error
    /// about `2e-7`; arguments below `-87` are clamped.
    #[inline(always)]
    fn exp_nonpositive(x: f32) -> f32 {
        const LN2_HI: f32 = 0.693_145_75;
        const LN2_LO: f32 = 1.428_606_8e-6;
        const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
        let x = x.max(-87.0);
        let t = x * std::f32::consts::LOG2_E + ROUND;
        let n = t - ROUND;
        let r = (x - n * LN2_HI) - n * LN2_LO;
        let p = 1.0
            + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        let k = t.to_bits() as i32 - ROUND.to_bits() as i32;
        p * f32::from_bits(((k + 127) as u32) << 23)
    }
}

/// Sum with `LANES` independent accumulators combined pairwise.
#[inline(always)]
fn lane_sum<T: Element>(values: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut chunks = values.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            acc[l] = acc[l] + c[l];
        }
    }
    for (l, &v) in chunks.remainder().iter().enumerate() {
        acc[l] = acc[l] + v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn lane_max<T: Element>(values: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let mut chunks = values.chunks_exact(LANES);
    for c in &mut chunks {
        for l in 0..LANES {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
        }
    }
    for (l, &v) in chunks.remainder().iter().enumerate() {
        acc[l] = if v > acc[l] { v } else { acc[l] };
    }
    acc.iter().copied().fold(T::neg_infinity(), T::max)
}

#[inline(always)]
fn lane_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[l] = acc[l] + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `softmax(x xᵀ / sqrt(C)) x` for `x: [N, C]`.
pub fn self_attention<T: SoftmaxExp>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c] = x.dims2("self_attention")?;
    let xs = x.data();
    let mut keys = vec![T::zero(); n * c];
    for j in 0..n {
        for k in 0..c {
            keys[k * n + j] = xs[j * c + k];
        }
    }
    let scale = T::one() / T::lit((c as f64).sqrt());
    let mut out = vec![T::zero(); n * c];
    out.par_chunks_mut((ROW_BLOCK * c).max(1)).enumerate().for_each(|(b, block)| {
        let rows = block.len() / c.max(1);
        let row0 = b * ROW_BLOCK;
        let mut max = vec![T::neg_infinity(); rows];
        let mut sum = vec![T::zero(); rows];
        let mut scores = [T::zero(); KEY_CHUNK];
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + KEY_CHUNK).min(n);
            let s = &mut scores[..j1 - j0];
            for r in 0..rows {
                let q = &xs[(row0 + r) * c..(row0 + r + 1) * c];
                s.fill(T::zero());
                for (k, &qk) in q.iter().enumerate() {
                    for (sv, &kv) in s.iter_mut().zip(&keys[k * n + j0..k * n + j1]) {
                        *sv = *sv + qk * kv;
                    }
                }
                for sv in s.iter_mut() {
                    *sv = *sv * scale;
                }
                let m = max[r].max(lane_max(s));
                let corr = T::exp_nonpositive(max[r] - m);
                for sv in s.iter_mut() {
                    *sv = T::exp_nonpositive(*sv - m);
                }
                sum[r] = sum[r] * corr + lane_sum(s);
                max[r] = m;
                let acc = &mut block[r * c..(r + 1) * c];
                for (k, a) in acc.iter_mut().enumerate() {
                    *a = *a * corr + lane_dot(s, &keys[k * n + j0..k * n + j1]);
                }
            }
            j0 = j1;
        }
        for r in 0..rows {
            for a in &mut block[r * c..(r + 1) * c] {
                *a = *a / sum[r];
            }
        }
    });
    Tensor::from_op([n, c], out, "self_attention")
}
