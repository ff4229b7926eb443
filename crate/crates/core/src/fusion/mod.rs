//! Camera/LiDAR fusion: channel alignment, gated cross-attention, three
//! BEV-SSM streams and hierarchical deformable cross-attention.

pub mod align;
pub mod attention;
pub mod hca;
pub mod network;

use crate::autograd::{bilinear_sample, Var};
use crate::bev::PolarGrid;
use crate::block::{BevSsmBlock, BlockConfig};
use crate::error::Result;
use crate::nn::{nested, Init, Params};
use crate::tensor::{Element, Tensor};

pub use align::ChannelAlign;
pub use attention::GatedCrossAttention;
pub use hca::Hca;
pub use network::{GmFuseNet, NetworkConfig};

/// Bilinear resampling of `[Hi, Wi, C]` to `[h, w, C]` with cell centers
/// aligned.
pub fn resample<T: Element>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let [hi, wi, c] = x.value().dims3("resample")?;
    if (hi, wi) == (h, w) {
        return Ok(x.clone());
    }
    let coords: Vec<T> = hca::reference_points(h, w, hi, wi).into_iter().map(T::lit).collect();
    let coords = Var::constant(Tensor::new([h * w, 2], coords)?);
    bilinear_sample(x, &coords)?.reshape([h, w, c])
}

/// Intermediate tensors of one fusion step.
#[derive(Debug, Clone)]
pub struct FusionTrace<T: Element = f64> {
    pub aligned: Var<T>,
    pub cross: Var<T>,
    pub streams: [Var<T>; 3],
    pub hca: Var<T>,
    pub output: Var<T>,
}

/// GM-Fusion at one pyramid level.
#[derive(Debug, Clone)]
pub struct GmFusion<T: Element = f64> {
    pub align: ChannelAlign<T>,
    pub cross: GatedCrossAttention<T>,
    pub block_aligned: BevSsmBlock<T>,
    pub block_bev: BevSsmBlock<T>,
    pub block_cross: BevSsmBlock<T>,
    pub hca: Hca<T>,
}

impl<T: Element> GmFusion<T> {
    pub fn new(init: &mut Init, cfg: BlockConfig, polar: &PolarGrid, levels: usize) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            align: ChannelAlign::new(&mut init.fork(), c),
            cross: GatedCrossAttention::new(&mut init.fork(), c),
            block_aligned: BevSsmBlock::new(&mut init.fork(), cfg, polar)?,
            block_bev: BevSsmBlock::new(&mut init.fork(), cfg, polar)?,
            block_cross: BevSsmBlock::new(&mut init.fork(), cfg, polar)?,
            hca: Hca::new(&mut init.fork(), c, levels, hca::DEFAULT_HEADS, hca::DEFAULT_POINTS)?,
        })
    }

    /// `img` and `bev` are `[H, W, C]` on this level's grid; `pyramid` holds
    /// the image features of every level.
    pub fn trace(&self, img: &Var<T>, bev: &Var<T>, pyramid: &[Var<T>], pe: &Var<T>) -> Result<FusionTrace<T>> {
        let aligned = self.align.forward(img, bev)?;
        let cross = self.cross.forward(bev, &aligned)?;
        let ((sa, sb), sc) = rayon::join(
            || {
                rayon::join(
                    || self.block_aligned.forward(&aligned, pe),
                    || self.block_bev.forward(bev, pe),
                )
            },
            || self.block_cross.forward(&cross, pe),
        );
        let (sa, sb, sc) = (sa?, sb?, sc?);
        let queries = sa.add(&sb)?;
        let hca = self.hca.forward(&queries, pyramid)?;
        let output = sc.add(&hca)?;
        Ok(FusionTrace {
            aligned,
            cross,
            streams: [sa, sb, sc],
            hca,
            output,
        })
    }

    pub fn forward(&self, img: &Var<T>, bev: &Var<T>, pyramid: &[Var<T>], pe: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(img, bev, pyramid, pe)?.output)
    }
}

impl<T: Element> Params<T> for GmFusion<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = nested("align", self.align.params_mut());
        out.extend(nested("cross", self.cross.params_mut()));
        out.extend(nested("block_aligned", self.block_aligned.params_mut()));
        out.extend(nested("block_bev", self.block_bev.params_mut()));
        out.extend(nested("block_cross", self.block_cross.params_mut()));
        out.extend(nested("hca", self.hca.params_mut()));
        out
    }
}
