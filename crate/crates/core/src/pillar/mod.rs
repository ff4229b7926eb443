//! Point cloud to pillar grid.
//!
//! Rows run along the forward `x` axis and columns along the lateral `y` axis.
//! Each axis is half-open: a point on `x_max` or `y_max` is dropped.

pub mod eigen;
pub mod features;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use features::FEATURES;

/// Highest accepted ring index plus one.
pub const RING_LIMIT: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub ring: u32,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64, ring: u32) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Invalid(format!("non-finite coordinate ({x}, {y}, {z})")));
        }
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Invalid(format!("reflectance must be finite and >= 0, got {r}")));
        }
        if ring >= RING_LIMIT {
            return Err(Error::Invalid(format!("ring index {ring} exceeds 255")));
        }
        Ok(Self { x, y, z, r, ring })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    rho: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    h: usize,
    w: usize,
}

fn exact_cells(key: &str, span: f64, rho: f64) -> Result<usize> {
    let cells = span * rho;
    let rounded = cells.round();
    if rounded < 1.0 || (cells - rounded).abs() > 1e-9 * rounded {
        return Err(Error::config(key, format!("extent times rho is {cells}, not a positive integer")));
    }
    Ok(rounded as usize)
}

impl GridConfig {
    pub fn new(rho: f64, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::config("rho", format!("must be positive, got {rho}")));
        }
        for (key, v) in [("x_min", x_min), ("x_max", x_max), ("y_min", y_min), ("y_max", y_max)] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        if x_min >= x_max {
            return Err(Error::config("x_max", format!("must exceed x_min ({x_max} <= {x_min})")));
        }
        if y_min >= y_max {
            return Err(Error::config("y_max", format!("must exceed y_min ({y_max} <= {y_min})")));
        }
        let h = exact_cells("x_max", x_max - x_min, rho)?;
        let w = exact_cells("y_max", y_max - y_min, rho)?;
        Ok(Self { rho, x_min, x_max, y_min, y_max, h, w })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.y_min, self.y_max)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Metric center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (row as f64 + 0.5) / self.rho,
            self.y_min + (col as f64 + 0.5) / self.rho,
        )
    }

    /// Cell containing `(x, y)`, or `None` outside `[min, max)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        // (x - x_min) * rho can round up to h for x just below x_max.
        let row = (((x - self.x_min) * self.rho).floor() as usize).min(self.h - 1);
        let col = (((y - self.y_min) * self.rho).floor() as usize).min(self.w - 1);
        Some((row, col))
    }
}

impl Default for GridConfig {
    /// 0.25 m cells over 0..32 m forward and -16..16 m lateral: 128 × 128.
    fn default() -> Self {
        Self::new(4.0, 0.0, 32.0, -16.0, 16.0).expect("default grid is valid")
    }
}

/// Point indices per cell, in input order.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub cells: Vec<Vec<usize>>,
    pub dropped: usize,
}

pub fn assign(points: &[LidarPoint], cfg: &GridConfig) -> Assignment {
    let mut cells = vec![Vec::new(); cfg.cells()];
    let mut dropped = 0;
    for (i, p) in points.iter().enumerate() {
        match cfg.cell_of(p.x, p.y) {
            Some((r, c)) => cells[r * cfg.width() + c].push(i),
            None => dropped += 1,
        }
    }
    Assignment { cells, dropped }
}

#[derive(Debug, Clone)]
pub struct PillarGrid {
    /// `[H, W, 14]`.
    pub features: Tensor,
    /// Point count per cell, row-major.
    pub occupancy: Vec<u32>,
    pub dropped: usize,
    pub config: GridConfig,
}

impl PillarGrid {
    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&m| m > 0).count()
    }

    pub fn total_points(&self) -> usize {
        self.occupancy.iter().map(|&m| m as usize).sum()
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.config.width() + col) * FEATURES;
        &self.features.data()[i..i + FEATURES]
    }
}

pub fn pillarize(points: &[LidarPoint], cfg: &GridConfig) -> Result<PillarGrid> {
    let assignment = assign(points, cfg);
    let w = cfg.width();
    let mut data = vec![0.0; cfg.cells() * FEATURES];
    data.par_chunks_mut(FEATURES)
        .zip(assignment.cells.par_iter())
        .enumerate()
        .filter(|(_, (_, idx))| !idx.is_empty())
        .for_each(|(cell, (out, idx))| {
            let mut pts: Vec<LidarPoint> = idx.iter().map(|&i| points[i]).collect();
            let center = cfg.cell_center(cell / w, cell % w);
            out.copy_from_slice(&features::pillar_features(&mut pts, center));
        });
    let occupancy = assignment.cells.iter().map(|c| c.len() as u32).collect();
    Ok(PillarGrid {
        features: Tensor::new([cfg.height(), w, FEATURES], data)?,
        occupancy,
        dropped: assignment.dropped,
        config: *cfg,
    })
}
