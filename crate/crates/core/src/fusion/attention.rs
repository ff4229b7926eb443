//! Single-head cross-attention with a per-channel gated residual.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{nested, Init, Linear, Params};
use crate::tensor::{Element, Tensor};

/// Largest flattened token count accepted on either side.
pub const MAX_TOKENS: usize = 4096;

#[derive(Debug, Clone)]
pub struct GatedCrossAttention<T: Element = f64> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub gate_logits: Var<T>,
}

fn tokens<T: Element>(x: &Var<T>) -> Result<(usize, usize)> {
    let [h, w, c] = x.value().dims3("cross_attention")?;
    let n = h * w;
    if n > MAX_TOKENS {
        return Err(Error::TokenOverflow { tokens: n, limit: MAX_TOKENS });
    }
    Ok((n, c))
}

impl<T: Element> GatedCrossAttention<T> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self {
            wq: Linear::new(init, channels, channels, false),
            wk: Linear::new(init, channels, channels, false),
            wv: Linear::new(init, channels, channels, false),
            wo: Linear::new(init, channels, channels, false),
            gate_logits: Var::param(Tensor::zeros([channels])),
        }
    }

    /// Row-stochastic attention matrix `[N, M]`.
    pub fn weights(&self, q_bev: &Var<T>, kv: &Var<T>) -> Result<Var<T>> {
        let (n, c) = tokens(q_bev)?;
        let (m, ck) = tokens(kv)?;
        if c != ck {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: q_bev.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let q = self.wq.forward(&q_bev.reshape([n, c])?)?;
        let k = self.wk.forward(&kv.reshape([m, c])?)?;
        q.matmul(&k.transpose()?)?
            .scale(T::lit(1.0 / (c as f64).sqrt()))?
            .softmax()
    }

    /// Attention output before gating, `[N, C]`.
    pub fn attend(&self, q_bev: &Var<T>, kv: &Var<T>) -> Result<Var<T>> {
        let p = self.weights(q_bev, kv)?;
        let (m, c) = tokens(kv)?;
        let v = self.wv.forward(&kv.reshape([m, c])?)?;
        self.wo.forward(&p.matmul(&v)?)
    }

    /// `q + σ(gate) ⊙ (attn - q)`, equal to `g ⊙ attn + (1 - g) ⊙ q`.
    pub fn forward(&self, q_bev: &Var<T>, kv: &Var<T>) -> Result<Var<T>> {
        let (n, c) = tokens(q_bev)?;
        let q = q_bev.reshape([n, c])?;
        let attn = self.attend(q_bev, kv)?;
        let g = self.gate_logits.sigmoid()?;
        q.add(&attn.sub(&q)?.mul(&g)?)?.reshape(q_bev.shape().to_vec())
    }
}

impl<T: Element> Params<T> for GatedCrossAttention<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = nested("wq", self.wq.params_mut());
        out.extend(nested("wk", self.wk.params_mut()));
        out.extend(nested("wv", self.wv.params_mut()));
        out.extend(nested("wo", self.wo.params_mut()));
        out.push(("gate_logits".into(), &mut self.gate_logits));
        out
    }
}
