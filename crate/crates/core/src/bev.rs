//! Ego-centric polar positional encoding of the BEV grid.
//!
//! Channels come in groups of four per frequency `k`:
//! `sin(dω_k)`, `cos(dω_k)`, `sin(θs ω_k)`, `cos(θs ω_k)` with
//! `ω_k = base^(-4k/C)` and `s = d_max / π`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::pillar::GridConfig;
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Distance and bearing of every cell center.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    h: usize,
    w: usize,
    d: Vec<f64>,
    theta: Vec<f64>,
}

/// Maps `-π` to `π` so bearings lie in `(-π, π]`.
fn half_open_bearing(theta: f64) -> f64 {
    if theta <= -PI {
        PI
    } else {
        theta
    }
}

/// Wraps any angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    half_open_bearing(t)
}

impl PolarGrid {
    /// Default ego position: rear edge of the grid, lateral midpoint.
    pub fn default_ego(cfg: &GridConfig) -> (f64, f64) {
        let (y0, y1) = cfg.y_range();
        (cfg.x_range().0, 0.5 * (y0 + y1))
    }

    /// Polar coordinates of cell centers relative to `ego` (meters).
    pub fn from_grid(cfg: &GridConfig, ego: (f64, f64)) -> Self {
        let (h, w) = (cfg.height(), cfg.width());
        let rho = cfg.rho();
        // Offsets are formed in cell units so that mirrored cells give
        // bitwise-negated offsets.
        let ego_u = (ego.0 - cfg.x_range().0) * rho;
        let ego_v = (ego.1 - cfg.y_range().0) * rho;
        let mut d = Vec::with_capacity(h * w);
        let mut theta = Vec::with_capacity(h * w);
        for r in 0..h {
            let dx = (r as f64 + 0.5 - ego_u) / rho;
            for c in 0..w {
                let dy = (c as f64 + 0.5 - ego_v) / rho;
                d.push(dx.hypot(dy));
                theta.push(if dx == 0.0 && dy == 0.0 { 0.0 } else { half_open_bearing(dy.atan2(dx)) });
            }
        }
        Self { h, w, d, theta }
    }

    pub fn from_default_ego(cfg: &GridConfig) -> Self {
        Self::from_grid(cfg, Self::default_ego(cfg))
    }

    /// Arbitrary fields, for synthetic inputs.
    pub fn from_fields(h: usize, w: usize, d: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if d.len() != h * w || theta.len() != h * w {
            return Err(Error::DataLength {
                shape: vec![h, w],
                len: d.len().min(theta.len()),
            });
        }
        if d.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("polar fields must be finite with d >= 0".into()));
        }
        Ok(Self { h, w, d, theta })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn distances(&self) -> &[f64] {
        &self.d
    }

    pub fn bearings(&self) -> &[f64] {
        &self.theta
    }

    pub fn d_max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

/// Frequency schedule of the encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeConfig {
    pub channels: usize,
    pub base_distance: f64,
    pub base_angle: f64,
}

impl PeConfig {
    pub fn new(channels: usize, base: f64) -> Result<Self> {
        let cfg = Self {
            channels,
            base_distance: base,
            base_angle: base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::config("channels", format!("must be a positive multiple of 4, got {}", self.channels)));
        }
        for b in [self.base_distance, self.base_angle] {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config("pe_base", format!("must be positive, got {b}")));
            }
        }
        Ok(())
    }

    pub fn omega(base: f64, k: usize, channels: usize) -> f64 {
        base.powf(-4.0 * k as f64 / channels as f64)
    }
}

#[derive(Debug, Clone)]
pub struct BevPosEncoding {
    /// `[H, W, C]`.
    pub enc: Tensor,
    pub config: PeConfig,
    pub angle_scale: f64,
}

/// Encoding with angle scale `d_max / π` taken from `pg` (1 if `d_max = 0`).
pub fn encode(pg: &PolarGrid, cfg: &PeConfig) -> Result<BevPosEncoding> {
    let d_max = pg.d_max();
    encode_with_scale(pg, cfg, if d_max > 0.0 { d_max / PI } else { 1.0 })
}

/// Encoding with an explicit angle scale.
pub fn encode_with_scale(pg: &PolarGrid, cfg: &PeConfig, angle_scale: f64) -> Result<BevPosEncoding> {
    cfg.validate()?;
    if !(angle_scale > 0.0 && angle_scale.is_finite()) {
        return Err(Error::Invalid(format!("angle scale must be positive, got {angle_scale}")));
    }
    let c = cfg.channels;
    let s = angle_scale;
    let freqs: Vec<(f64, f64)> = (0..c / 4)
        .map(|k| (PeConfig::omega(cfg.base_distance, k, c), PeConfig::omega(cfg.base_angle, k, c)))
        .collect();
    let mut data = Vec::with_capacity(pg.d.len() * c);
    for (&d, &theta) in pg.d.iter().zip(&pg.theta) {
        let t = wrap_angle(theta) * s;
        for &(wd, wa) in &freqs {
            let (sd, cd) = (d * wd).sin_cos();
            let (sa, ca) = (t * wa).sin_cos();
            data.extend_from_slice(&[sd, cd, sa, ca]);
        }
    }
    Ok(BevPosEncoding {
        enc: Tensor::new([pg.h, pg.w, c], data)?,
        config: *cfg,
        angle_scale: s,
    })
}
