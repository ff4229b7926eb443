//! BEV-SSM block.
//!
//! ```text
//! x ─ gated PE ─ depthwise 3×3 ─ pointwise ─┬─ identity ──────────────┐
//!                                           ├─ raster scan ─ AwareSSM ─┤
//!                                           ├─ zigzag scan ─ AwareSSM ─┼─ adaptive fuse ─(+x)─ out
//!                                           └─ multi-scale pool ───────┘
//! ```

use crate::autograd::{avg_pool, depthwise_conv3x3, upsample_nearest, Var};
use crate::bev::PolarGrid;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, nested, per_cell, Init, Linear, Params};
use crate::scan_order::{ScanOrder, ScanPattern};
use crate::ssm::aware::{AwareSsm, AwareSsmConfig};
use crate::tensor::{Element, Tensor};

pub const BRANCHES: usize = 4;
/// Pooling factors of the multi-scale branch besides the full resolution.
pub const POOL_FACTORS: [usize; 2] = [2, 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub d_state: usize,
    pub chunk_len: usize,
    /// Adds the block input to the fused output.
    pub residual: bool,
}

impl BlockConfig {
    pub fn new(channels: usize) -> Self {
        let ssm = AwareSsmConfig::new(channels);
        Self {
            channels,
            d_state: ssm.d_state,
            chunk_len: ssm.chunk_len,
            residual: true,
        }
    }

    fn ssm(&self) -> AwareSsmConfig {
        AwareSsmConfig {
            channels: self.channels,
            d_state: self.d_state,
            chunk_len: self.chunk_len,
        }
    }
}

/// Scan order with its sequence-ordered distances.
#[derive(Debug, Clone)]
struct Route {
    order: ScanOrder,
    distances: Vec<f64>,
}

/// `x + σ(gate) ⊙ pe`, equal to `g ⊙ (x + pe) + (1 - g) ⊙ x`.
pub fn gated_pe<T: Element>(x: &Var<T>, pe: &Var<T>, gate_logits: &Var<T>) -> Result<Var<T>> {
    if x.shape() != pe.shape() {
        return Err(Error::ShapeMismatch {
            op: "gated_pe",
            lhs: x.shape().to_vec(),
            rhs: pe.shape().to_vec(),
        });
    }
    x.add(&pe.mul(&gate_logits.sigmoid()?)?)
}

/// Depthwise 3×3 with bias, then a 1×1 channel mix.
pub fn dw_separable<T: Element>(x: &Var<T>, kernel: &Var<T>, bias: &Var<T>, pointwise: &Linear<T>) -> Result<Var<T>> {
    let y = depthwise_conv3x3(x, kernel)?.add(bias)?;
    per_cell(&y, |rows| pointwise.forward(rows))
}

/// Full, half and quarter resolution mixed per channel by `softmax(logits)`
/// over scales; `logits` is `[C, 3]`.
pub fn multi_scale<T: Element>(x: &Var<T>, logits: &Var<T>) -> Result<Var<T>> {
    let [h, w, c] = x.value().dims3("multi_scale")?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Invalid(format!("multi-scale branch needs dims divisible by 4, got {h}x{w}")));
    }
    let weights = logits.softmax()?;
    let mut out = x.mul(&weights.slice_last(0, 1)?.reshape([c])?)?;
    for (s, &f) in POOL_FACTORS.iter().enumerate() {
        let level = upsample_nearest(&avg_pool(x, f)?, f)?;
        let ws = weights.slice_last(s + 1, 1)?.reshape([c])?;
        out = out.add(&level.mul(&ws)?)?;
    }
    Ok(out)
}

/// Importance MLP of the adaptive fusion: pooled `[1, C]` to `[1, 4]` logits.
#[derive(Debug, Clone)]
pub struct FuseMlp<T: Element = f64> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Element> FuseMlp<T> {
    /// Output layer starts at zero, so the initial weights are uniform.
    pub fn new(init: &mut Init, channels: usize) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            hidden: Linear::new(init, channels, hidden, true),
            out: Linear::zeros(hidden, BRANCHES, true),
        }
    }

    pub fn forward(&self, pooled: &Var<T>) -> Result<Var<T>> {
        self.out.forward(&self.hidden.forward(pooled)?.silu()?)
    }
}

impl<T: Element> Params<T> for FuseMlp<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = nested("hidden", self.hidden.params_mut());
        out.extend(nested("out", self.out.params_mut()));
        out
    }
}

/// Weighted sum of the branches; also returns the `[1, 4]` weights.
pub fn adaptive_fuse<T: Element>(branches: &[Var<T>], mlp: &FuseMlp<T>) -> Result<(Var<T>, Var<T>)> {
    if branches.len() != BRANCHES {
        return Err(Error::Invalid(format!("adaptive_fuse needs {BRANCHES} branches, got {}", branches.len())));
    }
    for b in &branches[1..] {
        if b.shape() != branches[0].shape() {
            return Err(Error::ShapeMismatch {
                op: "adaptive_fuse",
                lhs: branches[0].shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let total = branches[1..].iter().try_fold(branches[0].clone(), |acc, b| acc.add(b))?;
    let weights = mlp.forward(&global_avg_pool(&total)?)?.softmax()?;
    let mut out: Option<Var<T>> = None;
    for (k, b) in branches.iter().enumerate() {
        let term = b.mul(&weights.slice_last(k, 1)?.reshape([1])?)?;
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok((out.expect("four branches"), weights))
}

/// Intermediate tensors of one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockTrace<T: Element = f64> {
    pub output: Var<T>,
    pub branches: Vec<Var<T>>,
    pub weights: Var<T>,
}

#[derive(Debug, Clone)]
pub struct BevSsmBlock<T: Element = f64> {
    pub config: BlockConfig,
    pub gate_logits: Var<T>,
    pub dw_kernel: Var<T>,
    pub dw_bias: Var<T>,
    pub pointwise: Linear<T>,
    pub msf_logits: Var<T>,
    pub ssm_raster: AwareSsm<T>,
    pub ssm_zigzag: AwareSsm<T>,
    pub fuse: FuseMlp<T>,
    raster: Route,
    zigzag: Route,
    d_max: f64,
    dims: (usize, usize),
}

impl<T: Element> BevSsmBlock<T> {
    /// Block for the grid whose cell distances are given by `polar`.
    pub fn new(init: &mut Init, cfg: BlockConfig, polar: &PolarGrid) -> Result<Self> {
        let (h, w) = polar.dims();
        if h < 3 || w < 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Invalid(format!("block grid must be at least 4x4 with dims divisible by 4, got {h}x{w}")));
        }
        let c = cfg.channels;
        let route = |pattern| -> Result<Route> {
            let order = ScanOrder::new(pattern, h, w)?;
            let distances = order.serialize_field(polar.distances())?;
            Ok(Route { order, distances })
        };
        Ok(Self {
            config: cfg,
            gate_logits: Var::param(Tensor::zeros([c])),
            dw_kernel: Var::param(init.fan_in([c, 3, 3], 9)),
            dw_bias: Var::param(Tensor::zeros([c])),
            pointwise: Linear::new(init, c, c, true),
            msf_logits: Var::param(Tensor::zeros([c, 3])),
            ssm_raster: AwareSsm::new(init, cfg.ssm(), ScanPattern::Raster),
            ssm_zigzag: AwareSsm::new(init, cfg.ssm(), ScanPattern::Zigzag),
            fuse: FuseMlp::new(init, c),
            raster: route(ScanPattern::Raster)?,
            zigzag: route(ScanPattern::Zigzag)?,
            d_max: polar.d_max().max(f64::MIN_POSITIVE),
            dims: (h, w),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    fn ssm_branch(&self, y: &Var<T>, ssm: &AwareSsm<T>, route: &Route) -> Result<Var<T>> {
        let seq = route.order.serialize_var(y)?;
        let out = ssm.forward(&seq, &route.distances, self.d_max)?;
        route.order.deserialize_var(&out)
    }

    pub fn trace(&self, x: &Var<T>, pe: &Var<T>) -> Result<BlockTrace<T>> {
        let [h, w, c] = x.value().dims3("bev_ssm_block")?;
        if (h, w) != self.dims || c != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "bev_ssm_block",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dims.0, self.dims.1, self.config.channels],
            });
        }
        let g = gated_pe(x, pe, &self.gate_logits)?;
        let y = dw_separable(&g, &self.dw_kernel, &self.dw_bias, &self.pointwise)?;
        let ((raster, zigzag), multi) = rayon::join(
            || {
                rayon::join(
                    || self.ssm_branch(&y, &self.ssm_raster, &self.raster),
                    || self.ssm_branch(&y, &self.ssm_zigzag, &self.zigzag),
                )
            },
            || multi_scale(&y, &self.msf_logits),
        );
        let branches = vec![y, raster?, zigzag?, multi?];
        let (fused, weights) = adaptive_fuse(&branches, &self.fuse)?;
        let output = if self.config.residual { fused.add(x)? } else { fused };
        Ok(BlockTrace {
            output,
            branches,
            weights,
        })
    }

    pub fn forward(&self, x: &Var<T>, pe: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(x, pe)?.output)
    }
}

impl<T: Element> Params<T> for BevSsmBlock<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = vec![
            ("gate_logits".to_string(), &mut self.gate_logits),
            ("dw_kernel".to_string(), &mut self.dw_kernel),
            ("dw_bias".to_string(), &mut self.dw_bias),
            ("msf_logits".to_string(), &mut self.msf_logits),
        ];
        out.extend(nested("pointwise", self.pointwise.params_mut()));
        out.extend(nested("ssm_raster", self.ssm_raster.params_mut()));
        out.extend(nested("ssm_zigzag", self.ssm_zigzag.params_mut()));
        out.extend(nested("fuse", self.fuse.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pillar::GridConfig;

    fn polar(n: usize) -> PolarGrid {
        PolarGrid::from_default_ego(&GridConfig::new(1.0, 0.0, n as f64, -(n as f64) / 2.0, n as f64 / 2.0).unwrap())
    }

    #[test]
    fn shape_preserved() {
        let block = BevSsmBlock::<f64>::new(&mut Init::new(0), BlockConfig::new(16), &polar(32)).unwrap();
        let x = Var::constant(Init::new(1).uniform([32, 32, 16], 1.0));
        let pe = Var::constant(Tensor::zeros([32, 32, 16]));
        assert_eq!(block.forward(&x, &pe).unwrap().shape(), &[32, 32, 16]);
    }

    #[test]
    fn uniform_initial_weights() {
        let block = BevSsmBlock::<f64>::new(&mut Init::new(0), BlockConfig::new(8), &polar(8)).unwrap();
        let x = Var::constant(Init::new(2).uniform([8, 8, 8], 1.0));
        let t = block.trace(&x, &Var::constant(Tensor::zeros([8, 8, 8]))).unwrap();
        assert_eq!(t.weights.value().data(), &[0.25; 4]);
    }

    #[test]
    fn rejects_wrong_dims() {
        assert!(BevSsmBlock::<f64>::new(&mut Init::new(0), BlockConfig::new(8), &polar(6)).is_err());
        let block = BevSsmBlock::<f64>::new(&mut Init::new(0), BlockConfig::new(8), &polar(8)).unwrap();
        let x = Var::constant(Tensor::zeros([8, 8, 4]));
        assert!(block.forward(&x, &x).is_err());
    }
}
