//! Hierarchical deformable cross-attention over an image pyramid.
//!
//! Each query cell owns a reference point on every pyramid level. Per level
//! and head, `K` sampling locations are predicted as
//! `ref + tanh(q W_off + b_off) * (H_s, W_s)` together with
//! `softmax(q W_attn + b_attn)` weights over the `K` points. Values are
//! bilinearly sampled, weighted, concatenated over heads and summed over
//! levels before the output projection.

use crate::autograd::{bilinear_sample, Var};
use crate::error::{Error, Result};
use crate::nn::{nested, Init, Linear, Params};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_POINTS: usize = 4;
pub const DEFAULT_HEADS: usize = 2;

#[derive(Debug, Clone)]
pub struct HcaLevel<T: Element = f64> {
    pub offset: Linear<T>,
    pub attn: Linear<T>,
    pub value: Linear<T>,
}

impl<T: Element> Params<T> for HcaLevel<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = nested("offset", self.offset.params_mut());
        out.extend(nested("attn", self.attn.params_mut()));
        out.extend(nested("value", self.value.params_mut()));
        out
    }
}

#[derive(Debug, Clone)]
pub struct Hca<T: Element = f64> {
    pub heads: usize,
    pub points: usize,
    pub levels: Vec<HcaLevel<T>>,
    pub out: Linear<T>,
}

/// Query cell centers mapped into a `(hs, ws)` level, in that level's cell
/// coordinates (integer = cell center).
pub fn reference_points(h: usize, w: usize, hs: usize, ws: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        let u = (i as f64 + 0.5) * hs as f64 / h as f64 - 0.5;
        for j in 0..w {
            out.push(u);
            out.push((j as f64 + 0.5) * ws as f64 / w as f64 - 0.5);
        }
    }
    out
}

impl<T: Element> Hca<T> {
    pub fn new(init: &mut Init, channels: usize, levels: usize, heads: usize, points: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) || points == 0 {
            return Err(Error::Invalid(format!(
                "HCA needs heads dividing channels and at least one point (C={channels}, heads={heads}, K={points})"
            )));
        }
        let levels = (0..levels)
            .map(|_| HcaLevel {
                offset: Linear::new(init, channels, heads * points * 2, true),
                attn: Linear::new(init, channels, heads * points, true),
                value: Linear::new(init, channels, channels, false),
            })
            .collect();
        Ok(Self {
            heads,
            points,
            levels,
            out: Linear::new(init, channels, channels, false),
        })
    }

    /// Sampling weights of one level, `[N * heads, K]`.
    pub fn sampling_weights(&self, q_rows: &Var<T>, level: usize) -> Result<Var<T>> {
        let n = q_rows.shape()[0];
        self.levels[level]
            .attn
            .forward(q_rows)?
            .reshape([n * self.heads, self.points])?
            .softmax()
    }

    /// Sampling coordinates of one level, `[N, heads * K * 2]`.
    pub fn sampling_offsets(&self, q_rows: &Var<T>, level: usize, extent: (usize, usize)) -> Result<Var<T>> {
        let scale = Var::constant(Tensor::new([2], vec![T::lit(extent.0 as f64), T::lit(extent.1 as f64)])?);
        let n = q_rows.shape()[0];
        let k = self.heads * self.points;
        self.levels[level]
            .offset
            .forward(q_rows)?
            .tanh()?
            .reshape([n * k, 2])?
            .mul(&scale)?
            .reshape([n, 2 * k])
    }

    fn level_output(&self, q_rows: &Var<T>, dims: (usize, usize), feat: &Var<T>, level: usize) -> Result<Var<T>> {
        let [hs, ws, c] = feat.value().dims3("hca")?;
        let n = q_rows.shape()[0];
        let dh = c / self.heads;
        let refs: Vec<T> = reference_points(dims.0, dims.1, hs, ws).into_iter().map(T::lit).collect();
        let refs = Var::constant(Tensor::new([n, 2], refs)?);
        let offsets = self.sampling_offsets(q_rows, level, (hs, ws))?;
        let weights = self.sampling_weights(q_rows, level)?.reshape([n, self.heads * self.points])?;
        let value = crate::nn::per_cell(feat, |rows| self.levels[level].value.forward(rows))?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let v = value.slice_last(h * dh, dh)?;
            let mut acc: Option<Var<T>> = None;
            for k in 0..self.points {
                let j = h * self.points + k;
                let coords = refs.add(&offsets.slice_last(2 * j, 2)?)?;
                let term = bilinear_sample(&v, &coords)?.mul(&weights.slice_last(j, 1)?)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            heads.push(acc.expect("at least one point"));
        }
        Var::concat_last(&heads)
    }

    /// `queries: [H, W, C]`, `pyramid[s]: [H_s, W_s, C]`; output `[H, W, C]`.
    pub fn forward(&self, queries: &Var<T>, pyramid: &[Var<T>]) -> Result<Var<T>> {
        let [h, w, c] = queries.value().dims3("hca")?;
        if pyramid.len() != self.levels.len() {
            return Err(Error::Invalid(format!(
                "HCA built for {} levels, got {}",
                self.levels.len(),
                pyramid.len()
            )));
        }
        for f in pyramid {
            if f.value().dims3("hca")?[2] != c {
                return Err(Error::ShapeMismatch {
                    op: "hca",
                    lhs: queries.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
        }
        let q_rows = queries.reshape([h * w, c])?;
        let mut total: Option<Var<T>> = None;
        for (s, feat) in pyramid.iter().enumerate() {
            let y = self.level_output(&q_rows, (h, w), feat, s)?;
            total = Some(match total {
                None => y,
                Some(t) => t.add(&y)?,
            });
        }
        let total = total.ok_or_else(|| Error::Invalid("HCA needs at least one level".into()))?;
        self.out.forward(&total)?.reshape([h, w, c])
    }
}

impl<T: Element> Params<T> for Hca<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = Vec::new();
        for (s, level) in self.levels.iter_mut().enumerate() {
            out.extend(nested(&format!("level{s}"), level.params_mut()));
        }
        out.extend(nested("out", self.out.params_mut()));
        out
    }
}
