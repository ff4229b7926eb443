//! Analytic floating-point operation counts.
//!
//! Conventions: one flop per elementwise arithmetic op, comparison or
//! transcendental; a length-`k` dot product or sum costs `2k` or `k` (the
//! accumulator starts at zero); padding taps of the 3×3 convolution are
//! counted. Counts are split into the leading term in the number of cells
//! `N` (`∝ N` for the block, `∝ N²` for attention) and the lower-order rest.

use std::ops::Add;

use crate::baseline::KEY_CHUNK;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Leading-order term in `N`.
    pub leading: u64,
    /// Lower-order terms.
    pub lower: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.leading + self.lower
    }

    fn leading(v: u64) -> Self {
        Self { leading: v, lower: 0 }
    }

    fn lower(v: u64) -> Self {
        Self { leading: 0, lower: v }
    }
}

impl Add for FlopCount {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            leading: self.leading + rhs.leading,
            lower: self.lower + rhs.lower,
        }
    }
}

fn matmul(n: u64, k: u64, m: u64) -> u64 {
    2 * n * k * m
}

fn softmax(rows: u64, len: u64) -> u64 {
    // max, subtract, exp, sum, divide
    5 * rows * len
}

/// Self-attention baseline on `[N, C]` as computed by
/// [`crate::baseline::self_attention`].
///
/// Per query/key pair: dot product `2C`, scale, running max, subtract, exp,
/// sum, weighted accumulation `2C`. Per query and key chunk: chunk max merge,
/// correction exp `2`, rescale of sum `2` and of the accumulator `2C`. Per
/// query: final division `C`.
pub fn attention(n: u64, c: u64) -> FlopCount {
    let chunks = n.div_ceil(KEY_CHUNK as u64);
    FlopCount::leading((4 * c + 5) * n * n + (2 * c + 5) * n * chunks) + FlopCount::lower(c * n)
}

/// One distance-aware scan branch over `n` steps.
pub fn aware_ssm(n: u64, c: u64, s: u64) -> FlopCount {
    let decay = FlopCount::lower(1) + FlopCount::leading(2 * n + n * c);
    let proj = FlopCount::leading(3 * matmul(n, c, s) + n * s);
    let transition = FlopCount::lower(softmax(1, 3) + 3 * s + 2 * s);
    let gates = FlopCount::leading(2 * n * s);
    let drive = FlopCount::leading(n * s);
    let scan = FlopCount::leading(2 * n * s);
    let out = FlopCount::leading(matmul(n, s, c));
    decay + proj + transition + gates + drive + scan + out
}

/// BEV-SSM block on an `h × w × c` grid with `s` state channels.
pub fn bev_ssm_block(h: u64, w: u64, c: u64, s: u64) -> FlopCount {
    let n = h * w;
    let hidden = (c / 4).max(1);
    let gated_pe = FlopCount::lower(c) + FlopCount::leading(2 * n * c);
    let depthwise = FlopCount::leading(18 * n * c + n * c);
    let pointwise = FlopCount::leading(matmul(n, c, c) + n * c);
    let ssm = aware_ssm(n, c, s) + aware_ssm(n, c, s);
    let multi = FlopCount::lower(softmax(c, 3))
        + FlopCount::leading(n * c)
        + FlopCount::leading(n * c + n / 4 * c + 2 * n * c)
        + FlopCount::leading(n * c + n / 16 * c + 2 * n * c);
    let fuse = FlopCount::leading(3 * n * c + n * c)
        + FlopCount::lower(c)
        + FlopCount::lower(matmul(1, c, hidden) + hidden + 2 * hidden + matmul(1, hidden, 4) + 4 + softmax(1, 4))
        + FlopCount::leading(4 * n * c + 3 * n * c);
    let residual = FlopCount::leading(n * c);
    gated_pe + depthwise + pointwise + ssm + multi + fuse + residual
}

/// Deformable cross-attention for `n` queries over pyramid levels with the
/// given cell counts.
pub fn hca(n: u64, c: u64, levels: &[u64], heads: u64, points: u64) -> FlopCount {
    let hk = heads * points;
    let dh = c / heads;
    let mut total = FlopCount::default();
    for &cells in levels {
        let offsets = matmul(n, c, 2 * hk) + 2 * n * hk + 2 * n * hk + 2 * n * hk;
        let weights = matmul(n, c, hk) + n * hk + softmax(n * heads, points);
        let values = matmul(cells, c, c);
        let sampling = n * hk * (2 + 8 * dh) + n * hk * dh + n * heads * (points - 1) * dh;
        total = total + FlopCount::leading(offsets + weights + sampling + n * c) + FlopCount::lower(values);
    }
    total + FlopCount::leading(matmul(n, c, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_is_quadratic() {
        assert_eq!(attention(4096, 16).leading, 16 * attention(1024, 16).leading);
        assert_eq!(attention(4096, 16).lower, 4 * attention(1024, 16).lower);
    }

    #[test]
    fn block_spatial_is_linear() {
        let a = bev_ssm_block(32, 32, 16, 16);
        let b = bev_ssm_block(64, 64, 16, 16);
        assert_eq!(b.leading, 4 * a.leading);
        assert_eq!(a.lower, b.lower);
    }
}
