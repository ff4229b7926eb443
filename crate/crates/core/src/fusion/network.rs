//! Four-level fusion network over a pillar grid and a camera image.
//!
//! Both modalities go through a stand-in backbone: a 2×2 space-to-depth stem
//! with a channel projection, then a shared strided 2×2 projection applied
//! three more times. Level `s` therefore has `H / 2^(s+1)` rows. Every level
//! is fused separately; the fused maps are upsampled to the input grid and
//! summed.

use crate::autograd::{space_to_depth, upsample_nearest, Var};
use crate::bev::{encode, PeConfig, PolarGrid, DEFAULT_BASE};
use crate::block::BlockConfig;
use crate::error::{Error, Result};
use crate::nn::{nested, per_cell, Init, Linear, Params};
use crate::pillar::{GridConfig, FEATURES};
use crate::tensor::{Element, Tensor};

use super::{resample, GmFusion};

pub const LEVELS: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;
/// Grid dims must be multiples of this for every level to fit the block.
pub const GRID_MULTIPLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub grid: GridConfig,
    pub block: BlockConfig,
    pub pe_base: f64,
}

impl NetworkConfig {
    pub fn new(grid: GridConfig, channels: usize) -> Self {
        Self {
            grid,
            block: BlockConfig::new(channels),
            pe_base: DEFAULT_BASE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.grid.height(), self.grid.width());
        if h % GRID_MULTIPLE != 0 || w % GRID_MULTIPLE != 0 {
            return Err(Error::config(
                "rho",
                format!("grid {h}x{w} must have both dims divisible by {GRID_MULTIPLE}"),
            ));
        }
        PeConfig::new(self.block.channels, self.pe_base)?;
        if self.block.d_state == 0 {
            return Err(Error::config("d_state", "must be positive"));
        }
        if self.block.chunk_len == 0 {
            return Err(Error::config("chunk_len", "must be positive"));
        }
        Ok(())
    }

    /// Grid of pyramid level `s`, same metric extent at a coarser `rho`.
    pub fn level_grid(&self, s: usize) -> Result<GridConfig> {
        let (x0, x1) = self.grid.x_range();
        let (y0, y1) = self.grid.y_range();
        GridConfig::new(self.grid.rho() / f64::from(1u32 << (s + 1)), x0, x1, y0, y1)
    }
}

#[derive(Debug, Clone)]
pub struct GmFuseNet<T: Element = f64> {
    pub config: NetworkConfig,
    pub bev_stem: Linear<T>,
    pub img_stem: Linear<T>,
    pub down: Linear<T>,
    pub levels: Vec<GmFusion<T>>,
    encodings: Vec<Var<T>>,
}

impl<T: Element> GmFuseNet<T> {
    pub fn new(seed: u64, config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = config.block.channels;
        let mut init = Init::new(seed);
        let bev_stem = Linear::new(&mut init, 4 * FEATURES, c, true);
        let img_stem = Linear::new(&mut init, 4 * IMAGE_CHANNELS, c, true);
        let down = Linear::new(&mut init, 4 * c, c, true);
        let mut levels = Vec::with_capacity(LEVELS);
        let mut encodings = Vec::with_capacity(LEVELS);
        for s in 0..LEVELS {
            let grid = config.level_grid(s)?;
            let polar = PolarGrid::from_default_ego(&grid);
            let pe = encode(&polar, &PeConfig::new(c, config.pe_base)?)?;
            encodings.push(Var::constant(pe.enc.cast::<T>()?));
            levels.push(GmFusion::new(&mut init.fork(), config.block, &polar, LEVELS)?);
        }
        Ok(Self {
            config,
            bev_stem,
            img_stem,
            down,
            levels,
            encodings,
        })
    }

    /// Positional encoding of level `s`.
    pub fn encoding(&self, s: usize) -> &Var<T> {
        &self.encodings[s]
    }

    fn pyramid(&self, x: &Var<T>, stem: &Linear<T>) -> Result<Vec<Var<T>>> {
        let mut out = Vec::with_capacity(LEVELS);
        let mut cur = per_cell(&space_to_depth(x, 2)?, |r| stem.forward(r))?.silu()?;
        for _ in 1..LEVELS {
            let next = per_cell(&space_to_depth(&cur, 2)?, |r| self.down.forward(r))?.silu()?;
            out.push(cur);
            cur = next;
        }
        out.push(cur);
        Ok(out)
    }

    pub fn bev_pyramid(&self, pillars: &Var<T>) -> Result<Vec<Var<T>>> {
        let [h, w, f] = pillars.value().dims3("gm_fuse_net")?;
        if (h, w, f) != (self.config.grid.height(), self.config.grid.width(), FEATURES) {
            return Err(Error::ShapeMismatch {
                op: "gm_fuse_net",
                lhs: pillars.shape().to_vec(),
                rhs: vec![self.config.grid.height(), self.config.grid.width(), FEATURES],
            });
        }
        self.pyramid(pillars, &self.bev_stem)
    }

    pub fn image_pyramid(&self, image: &Var<T>) -> Result<Vec<Var<T>>> {
        let [h, w, c] = image.value().dims3("gm_fuse_net")?;
        let m = 1 << LEVELS;
        if c != IMAGE_CHANNELS || h % m != 0 || w % m != 0 {
            return Err(Error::Invalid(format!(
                "image must be HxWx{IMAGE_CHANNELS} with dims divisible by {m}, got {h}x{w}x{c}"
            )));
        }
        self.pyramid(image, &self.img_stem)
    }

    /// Per-level fused maps, each at its own resolution.
    pub fn fuse_levels(&self, pillars: &Var<T>, image: &Var<T>) -> Result<Vec<Var<T>>> {
        let bev = self.bev_pyramid(pillars)?;
        let img = self.image_pyramid(image)?;
        let mut out = Vec::with_capacity(LEVELS);
        for (s, fusion) in self.levels.iter().enumerate() {
            let [h, w, _] = bev[s].value().dims3("gm_fuse_net")?;
            let img_s = resample(&img[s], h, w)?;
            out.push(fusion.forward(&img_s, &bev[s], &img, &self.encodings[s])?);
        }
        Ok(out)
    }

    /// `[H, W, 14]` pillars and `[Hi, Wi, 3]` image to `[H, W, C]`.
    pub fn forward(&self, pillars: &Var<T>, image: &Var<T>) -> Result<Var<T>> {
        let h = self.config.grid.height();
        let mut total: Option<Var<T>> = None;
        for fused in self.fuse_levels(pillars, image)? {
            let up = upsample_nearest(&fused, h / fused.shape()[0])?;
            total = Some(match total {
                None => up,
                Some(t) => t.add(&up)?,
            });
        }
        total.ok_or_else(|| Error::Invalid("no pyramid levels".into()))
    }

    /// Seeded stand-in image `[H, W, 3]` with values in `[0, 1]`.
    pub fn synthetic_image(seed: u64, h: usize, w: usize) -> Tensor<T> {
        Init::new(seed ^ 0x1A6E).uniform::<T>([h, w, IMAGE_CHANNELS], 0.5).map("image", |v| v + T::lit(0.5)).expect("finite")
    }
}

impl<T: Element> Params<T> for GmFuseNet<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = nested("bev_stem", self.bev_stem.params_mut());
        out.extend(nested("img_stem", self.img_stem.params_mut()));
        out.extend(nested("down", self.down.params_mut()));
        for (s, level) in self.levels.iter_mut().enumerate() {
            out.extend(nested(&format!("level{s}"), level.params_mut()));
        }
        out
    }
}
