//! Squeeze-excitation alignment of image and BEV channels.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, nested, per_cell, Init, Linear, Params};
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct ChannelAlign<T: Element = f64> {
    pub squeeze: Linear<T>,
    pub excite: Linear<T>,
    pub merge: Linear<T>,
}

impl<T: Element> ChannelAlign<T> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        let c2 = 2 * channels;
        let hidden = (channels / 2).max(1);
        Self {
            squeeze: Linear::new(init, c2, hidden, true),
            excite: Linear::new(init, hidden, c2, true),
            merge: Linear::new(init, c2, channels, false),
        }
    }

    /// Per-channel scales `[1, 2C]` in (0, 1) for the concatenated input.
    pub fn scales(&self, cat: &Var<T>) -> Result<Var<T>> {
        let pooled = global_avg_pool(cat)?;
        self.excite.forward(&self.squeeze.forward(&pooled)?.silu()?)?.sigmoid()
    }

    /// Returns the aligned `[H, W, C]` map and the scales.
    pub fn forward_with_scales(&self, img: &Var<T>, bev: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if img.shape() != bev.shape() {
            return Err(Error::ShapeMismatch {
                op: "channel_align",
                lhs: img.shape().to_vec(),
                rhs: bev.shape().to_vec(),
            });
        }
        let cat = Var::concat_last(&[img.clone(), bev.clone()])?;
        let s = self.scales(&cat)?;
        let scaled = cat.mul(&s)?;
        let out = per_cell(&scaled, |rows| self.merge.forward(rows))?;
        Ok((out, s))
    }

    pub fn forward(&self, img: &Var<T>, bev: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_scales(img, bev)?.0)
    }
}

impl<T: Element> Params<T> for ChannelAlign<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = nested("squeeze", self.squeeze.params_mut());
        out.extend(nested("excite", self.excite.params_mut()));
        out.extend(nested("merge", self.merge.params_mut()));
        out
    }
}
