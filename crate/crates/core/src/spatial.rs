//! Channels-last spatial kernels on `[H, W, C]` maps, each paired with its
//! vector-Jacobian product for the gradient tape.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::reduce::pairwise_sum;
use crate::tensor::{Element, Tensor};

/// 3x3 depthwise convolution, stride 1, zero padding.
///
/// `kernel` is `[C, 3, 3]`; tap `(a, b)` reads `x[i + a - 1, j + b - 1]`.
pub fn depthwise_conv3x3<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, c] = x.dims3("depthwise_conv3x3")?;
    if kernel.shape() != [c, 3, 3] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv3x3",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (xs, ks) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut((w * c).max(1)).enumerate().for_each(|(i, row)| {
        for a in 0..3 {
            let Some(si) = (i + a).checked_sub(1).filter(|&si| si < h) else {
                continue;
            };
            for b in 0..3 {
                for j in 0..w {
                    let Some(sj) = (j + b).checked_sub(1).filter(|&sj| sj < w) else {
                        continue;
                    };
                    let src = &xs[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let dst = &mut row[j * c..(j + 1) * c];
                    for ch in 0..c {
                        dst[ch] = dst[ch] + src[ch] * ks[ch * 9 + a * 3 + b];
                    }
                }
            }
        }
    });
    Tensor::from_op(x.shape().to_vec(), out, "depthwise_conv3x3")
}

/// Adjoints of [`depthwise_conv3x3`] with respect to input and kernel.
pub fn depthwise_conv3x3_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [h, w, c] = x.dims3("depthwise_conv3x3_backward")?;
    let (xs, ks, gs) = (x.data(), kernel.data(), grad.data());

    // dx[p, q] = sum_{a,b} g[p - a + 1, q - b + 1] * k[a, b]
    let mut gx = vec![T::zero(); x.len()];
    gx.par_chunks_mut((w * c).max(1)).enumerate().for_each(|(p, row)| {
        for a in 0..3 {
            let Some(i) = (p + 1).checked_sub(a).filter(|&i| i < h) else {
                continue;
            };
            for b in 0..3 {
                for q in 0..w {
                    let Some(j) = (q + 1).checked_sub(b).filter(|&j| j < w) else {
                        continue;
                    };
                    let g = &gs[(i * w + j) * c..(i * w + j + 1) * c];
                    let dst = &mut row[q * c..(q + 1) * c];
                    for ch in 0..c {
                        dst[ch] = dst[ch] + g[ch] * ks[ch * 9 + a * 3 + b];
                    }
                }
            }
        }
    });

    // dk[ch, a, b] = sum_{i,j} g[i, j, ch] * x[i + a - 1, j + b - 1, ch],
    // accumulated per row then summed over rows in order.
    let per_row: Vec<Vec<T>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![T::zero(); c * 9];
            for a in 0..3 {
                let Some(si) = (i + a).checked_sub(1).filter(|&si| si < h) else {
                    continue;
                };
                for b in 0..3 {
                    for j in 0..w {
                        let Some(sj) = (j + b).checked_sub(1).filter(|&sj| sj < w) else {
                            continue;
                        };
                        let g = &gs[(i * w + j) * c..(i * w + j + 1) * c];
                        let src = &xs[(si * w + sj) * c..(si * w + sj + 1) * c];
                        for ch in 0..c {
                            acc[ch * 9 + a * 3 + b] = acc[ch * 9 + a * 3 + b] + g[ch] * src[ch];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut gk = vec![T::zero(); c * 9];
    for row in &per_row {
        for (dst, &v) in gk.iter_mut().zip(row) {
            *dst = *dst + v;
        }
    }
    Ok((
        Tensor::from_op(x.shape().to_vec(), gx, "depthwise_conv3x3_backward")?,
        Tensor::from_op(kernel.shape().to_vec(), gk, "depthwise_conv3x3_backward")?,
    ))
}

fn check_divisible<T: Element>(x: &Tensor<T>, factor: usize, op: &'static str) -> Result<[usize; 3]> {
    let [h, w, c] = x.dims3(op)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Invalid(format!(
            "{op}: spatial dims {h}x{w} not divisible by {factor}"
        )));
    }
    Ok([h, w, c])
}

/// Non-overlapping `factor x factor` average pooling.
pub fn avg_pool<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [h, w, c] = check_divisible(x, factor, "avg_pool")?;
    let (oh, ow) = (h / factor, w / factor);
    let xs = x.data();
    let inv = T::one() / T::lit((factor * factor) as f64);
    let mut out = vec![T::zero(); oh * ow * c];
    out.par_chunks_mut((ow * c).max(1)).enumerate().for_each(|(i, row)| {
        for j in 0..ow {
            let dst = &mut row[j * c..(j + 1) * c];
            for a in 0..factor {
                for b in 0..factor {
                    let s = ((i * factor + a) * w + j * factor + b) * c;
                    for ch in 0..c {
                        dst[ch] = dst[ch] + xs[s + ch];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v = *v * inv;
            }
        }
    });
    Tensor::from_op(vec![oh, ow, c], out, "avg_pool")
}

pub fn avg_pool_backward<T: Element>(input_shape: &[usize], factor: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let inv = T::one() / T::lit((factor * factor) as f64);
    let up = upsample_nearest(grad, factor)?;
    debug_assert_eq!(up.shape(), input_shape);
    up.map("avg_pool_backward", |g| g * inv)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [h, w, c] = x.dims3("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::Invalid("upsample_nearest: zero factor".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xs = x.data();
    let mut out = vec![T::zero(); oh * ow * c];
    out.par_chunks_mut((ow * c).max(1)).enumerate().for_each(|(i, row)| {
        let si = i / factor;
        for j in 0..ow {
            let s = (si * w + j / factor) * c;
            row[j * c..(j + 1) * c].copy_from_slice(&xs[s..s + c]);
        }
    });
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

/// Adjoint of [`upsample_nearest`]: block sums.
pub fn upsample_nearest_backward<T: Element>(grad: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let pooled = avg_pool(grad, factor)?;
    let scale = T::lit((factor * factor) as f64);
    pooled.map("upsample_backward", |g| g * scale)
}

/// Moves each `factor x factor` block into channels, ordered `(a, b, c)`.
pub fn space_to_depth<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [h, w, c] = check_divisible(x, factor, "space_to_depth")?;
    let (oh, ow, oc) = (h / factor, w / factor, c * factor * factor);
    let xs = x.data();
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut((ow * oc).max(1)).enumerate().for_each(|(i, row)| {
        for j in 0..ow {
            for a in 0..factor {
                for b in 0..factor {
                    let s = ((i * factor + a) * w + j * factor + b) * c;
                    let d = j * oc + (a * factor + b) * c;
                    row[d..d + c].copy_from_slice(&xs[s..s + c]);
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![oh, ow, oc], out))
}

/// Inverse of [`space_to_depth`] (and therefore its adjoint).
pub fn depth_to_space<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [oh, ow, oc] = x.dims3("depth_to_space")?;
    if factor == 0 || oc % (factor * factor) != 0 {
        return Err(Error::Invalid(format!(
            "depth_to_space: {oc} channels not divisible by {}",
            factor * factor
        )));
    }
    let c = oc / (factor * factor);
    let (h, w) = (oh * factor, ow * factor);
    let xs = x.data();
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut((w * c).max(1)).enumerate().for_each(|(p, row)| {
        let (i, a) = (p / factor, p % factor);
        for q in 0..w {
            let (j, b) = (q / factor, q % factor);
            let s = (i * ow + j) * oc + (a * factor + b) * c;
            row[q * c..(q + 1) * c].copy_from_slice(&xs[s..s + c]);
        }
    });
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// The four bilinear taps of a continuous `(u, v)` location: integer
/// coordinates are cell centres, `u` runs along rows and `v` along columns.
/// Taps falling outside the map are omitted (zero padding).
#[derive(Debug, Clone, Copy)]
struct Taps<T> {
    u0: isize,
    v0: isize,
    fu: T,
    fv: T,
}

impl<T: Element> Taps<T> {
    fn new(u: T, v: T, h: usize, w: usize) -> Option<Self> {
        // Anything further than one cell outside has no in-range tap.
        let lo = T::lit(-1.0);
        if !(u > lo && v > lo && u < T::lit(h as f64) && v < T::lit(w as f64)) {
            return None;
        }
        let (uf, vf) = (u.floor(), v.floor());
        Some(Self {
            u0: uf.as_f64() as isize,
            v0: vf.as_f64() as isize,
            fu: u - uf,
            fv: v - vf,
        })
    }

    /// `(flat cell index, weight, d weight/du, d weight/dv)` for in-range taps.
    fn each(&self, h: usize, w: usize, mut f: impl FnMut(usize, T, T, T)) {
        let one = T::one();
        let corners = [
            (0, 0, (one - self.fu) * (one - self.fv), -(one - self.fv), -(one - self.fu)),
            (0, 1, (one - self.fu) * self.fv, -self.fv, one - self.fu),
            (1, 0, self.fu * (one - self.fv), one - self.fv, -self.fu),
            (1, 1, self.fu * self.fv, self.fv, self.fu),
        ];
        for (du, dv, wt, dwu, dwv) in corners {
            let (i, j) = (self.u0 + du, self.v0 + dv);
            if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                f(i as usize * w + j as usize, wt, dwu, dwv);
            }
        }
    }
}

fn check_coords<T: Element>(feat: &Tensor<T>, coords: &Tensor<T>) -> Result<([usize; 3], usize)> {
    let dims = feat.dims3("bilinear_sample")?;
    let [p, two] = coords.dims2("bilinear_sample")?;
    if two != 2 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample",
            lhs: feat.shape().to_vec(),
            rhs: coords.shape().to_vec(),
        });
    }
    Ok((dims, p))
}

/// Bilinear interpolation of `feat` at each `(u, v)` row of `coords` (`[P, 2]`).
pub fn bilinear_sample<T: Element>(feat: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let ([h, w, c], p) = check_coords(feat, coords)?;
    let (fs, cs) = (feat.data(), coords.data());
    let mut out = vec![T::zero(); p * c];
    out.par_chunks_mut(c.max(1))
        .with_min_len(64)
        .enumerate()
        .for_each(|(k, dst)| {
            let Some(taps) = Taps::new(cs[2 * k], cs[2 * k + 1], h, w) else {
                return;
            };
            taps.each(h, w, |cell, wt, _, _| {
                let src = &fs[cell * c..(cell + 1) * c];
                for ch in 0..c {
                    dst[ch] = dst[ch] + wt * src[ch];
                }
            });
        });
    Tensor::from_op(vec![p, c], out, "bilinear_sample")
}

/// Adjoints of [`bilinear_sample`] with respect to the map and the coordinates.
pub fn bilinear_sample_backward<T: Element>(
    feat: &Tensor<T>,
    coords: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ([h, w, c], p) = check_coords(feat, coords)?;
    let (fs, cs, gs) = (feat.data(), coords.data(), grad.data());
    let mut gfeat = vec![T::zero(); feat.len()];
    let mut gcoord = vec![T::zero(); p * 2];
    for k in 0..p {
        let Some(taps) = Taps::new(cs[2 * k], cs[2 * k + 1], h, w) else {
            continue;
        };
        let g = &gs[k * c..(k + 1) * c];
        let (mut gu, mut gv) = (T::zero(), T::zero());
        taps.each(h, w, |cell, wt, dwu, dwv| {
            let src = &fs[cell * c..(cell + 1) * c];
            let dst = &mut gfeat[cell * c..(cell + 1) * c];
            let mut dot = T::zero();
            for ch in 0..c {
                dst[ch] = dst[ch] + wt * g[ch];
                dot = dot + g[ch] * src[ch];
            }
            gu = gu + dwu * dot;
            gv = gv + dwv * dot;
        });
        gcoord[2 * k] = gu;
        gcoord[2 * k + 1] = gv;
    }
    Ok((
        Tensor::from_op(feat.shape().to_vec(), gfeat, "bilinear_sample_backward")?,
        Tensor::from_op(coords.shape().to_vec(), gcoord, "bilinear_sample_backward")?,
    ))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| Error::Rank {
        op: "softmax",
        expected: 1,
        shape: vec![],
    })?;
    if n == 0 {
        return Err(Error::EmptyReduction);
    }
    let xs = x.data();
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(n)
        .with_min_len((4096 / n).max(1))
        .enumerate()
        .for_each(|(r, row)| {
            let src = &xs[r * n..(r + 1) * n];
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            for (o, &v) in row.iter_mut().zip(src) {
                *o = (v - m).exp();
            }
            let inv = T::one() / pairwise_sum(row);
            for o in row.iter_mut() {
                *o = *o * inv;
            }
        });
    Tensor::from_op(x.shape().to_vec(), out, "softmax")
}

/// Adjoint of [`softmax_last`] given its output `y`: `y * (g - <g, y>)`.
pub fn softmax_last_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *y.shape().last().unwrap_or(&1);
    let (ys, gs) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.len()];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(r, row)| {
        let (yr, gr) = (&ys[r * n..(r + 1) * n], &gs[r * n..(r + 1) * n]);
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &yv), &gv) in row.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    });
    Tensor::from_op(y.shape().to_vec(), out, "softmax_backward")
}
