//! Per-pillar feature extraction.
//!
//! Channel layout of the 14-vector:
//!
//! | channels | content |
//! |----------|---------|
//! | 0..8     | max of `x, y, z, r, ring, Δx, Δy, Δz` |
//! | 8, 9     | mean and population variance of `r` |
//! | 10..14   | linearity, planarity, sphericity, anisotropy |

use super::eigen::symmetric_eigenvalues;
use super::LidarPoint;
use crate::reduce::pairwise_sum;

pub const FEATURES: usize = 14;
pub const POOLED: std::ops::Range<usize> = 0..8;
pub const INTENSITY: std::ops::Range<usize> = 8..10;
pub const SHAPE: std::ops::Range<usize> = 10..14;

/// Largest eigenvalue below which a pillar has no measurable shape.
pub const DEGENERATE_EIGEN: f64 = 1e-12;

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    pairwise_sum(&v) / v.len() as f64
}

/// Max-pooled `[x, y, z, r, ring, Δx, Δy, Δz]` for a non-empty pillar with
/// center `(xc, yc)`; `Δz` is relative to the pillar's mean height.
pub fn pooled_features(points: &[LidarPoint], center: (f64, f64)) -> [f64; 8] {
    assert!(!points.is_empty(), "pooled_features needs at least one point");
    let z_mean = mean(points.iter().map(|p| p.z));
    let mut out = [f64::NEG_INFINITY; 8];
    for p in points {
        let row = [
            p.x,
            p.y,
            p.z,
            p.r,
            f64::from(p.ring),
            p.x - center.0,
            p.y - center.1,
            p.z - z_mean,
        ];
        for (o, v) in out.iter_mut().zip(row) {
            *o = o.max(v);
        }
    }
    out
}

/// Mean and population variance of reflectance.
pub fn intensity_stats(points: &[LidarPoint]) -> (f64, f64) {
    assert!(!points.is_empty(), "intensity_stats needs at least one point");
    let mu = mean(points.iter().map(|p| p.r));
    let var = mean(points.iter().map(|p| (p.r - mu) * (p.r - mu)));
    (mu, var)
}

/// Population covariance of `(x, y, z)`.
pub fn covariance(points: &[LidarPoint]) -> [[f64; 3]; 3] {
    let coords = |p: &LidarPoint| [p.x, p.y, p.z];
    let mut mu = [0.0; 3];
    for (k, m) in mu.iter_mut().enumerate() {
        *m = mean(points.iter().map(|p| coords(p)[k]));
    }
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let c = mean(points.iter().map(|p| (coords(p)[i] - mu[i]) * (coords(p)[j] - mu[j])));
            cov[i][j] = c;
            cov[j][i] = c;
        }
    }
    cov
}

/// `[linearity, planarity, sphericity, anisotropy]`, all zero for fewer than
/// three points or a vanishing leading eigenvalue.
pub fn shape_descriptors(points: &[LidarPoint]) -> [f64; 4] {
    if points.len() < 3 {
        return [0.0; 4];
    }
    let [l1, l2, l3] = symmetric_eigenvalues(covariance(points));
    if l1 <= DEGENERATE_EIGEN {
        return [0.0; 4];
    }
    [(l1 - l2) / l1, (l2 - l3) / l1, l3 / l1, (l1 - l3) / l1]
}

/// Total order on points used to make pillar features independent of input order.
pub(crate) fn canonical_cmp(a: &LidarPoint, b: &LidarPoint) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.r.total_cmp(&b.r))
        .then(a.ring.cmp(&b.ring))
}

/// Full 14-vector of a pillar; zero when empty.
pub fn pillar_features(points: &mut [LidarPoint], center: (f64, f64)) -> [f64; FEATURES] {
    let mut out = [0.0; FEATURES];
    if points.is_empty() {
        return out;
    }
    points.sort_by(canonical_cmp);
    out[POOLED].copy_from_slice(&pooled_features(points, center));
    let (mu, var) = intensity_stats(points);
    out[8] = mu;
    out[9] = var;
    out[SHAPE].copy_from_slice(&shape_descriptors(points));
    out
}
