//! Distance-decayed, direction-weighted selective scan over a serialized grid.
//!
//! For an input sequence `x` of shape `[L, C]` with per-step ego distances `d`:
//!
//! ```text
//! x'      = x * exp(-λ d / d_max)
//! B, C, Δ = x' W_B, x' W_C, x' W_Δ + b_Δ          each [L, S]
//! A       = Σ_k softmax(w_pattern)_k A_k           k ∈ {forward, lateral, backward}
//! h_t     = σ(A + Δ_t) h_{t-1} + B_t C_t
//! y       = h W_out                                [L, C]
//! ```
//!
//! `λ = softplus(λ_raw)` stays positive.

use std::sync::Arc;

use crate::autograd::{linear_scan, Var};
use crate::error::{Error, Result};
use crate::nn::{nested, Init, Linear, Params};
use crate::scan_order::ScanPattern;
use crate::ssm::scan::DEFAULT_CHUNK;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_D_STATE: usize = 16;

/// Initial directional weights `(forward, lateral, backward)` per pattern.
pub const RASTER_INIT: [f64; 3] = [0.5, 0.3, 0.2];
pub const ZIGZAG_INIT: [f64; 3] = [0.4, 0.4, 0.2];

fn pattern_row(pattern: ScanPattern) -> usize {
    match pattern {
        ScanPattern::Raster => 0,
        ScanPattern::Zigzag => 1,
    }
}

/// `exp(-λ d_i / d_max)`, with distances beyond `d_max` clamped.
pub fn decay_factors(d: &[f64], lambda: f64, d_max: f64) -> Vec<f64> {
    decay_ratios(d, d_max).iter().map(|&r| (-r * lambda).exp()).collect()
}

/// `-d_i / d_max`, clamped to `[-1, 0]`.
fn decay_ratios(d: &[f64], d_max: f64) -> Vec<f64> {
    let mut clamped = 0;
    let out = d
        .iter()
        .map(|&di| {
            if di > d_max {
                clamped += 1;
            }
            di.min(d_max) / d_max
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} distances exceed d_max = {d_max} and were clamped");
    }
    out
}

/// Scales each row `x_i` of `[L, C]` by `exp(-λ d_i / d_max)`.
pub fn distance_decay(x: &Tensor, d: &[f64], lambda: f64, d_max: f64) -> Result<Tensor> {
    let [len, c] = x.dims2("distance_decay")?;
    if d.len() != len {
        return Err(Error::ShapeMismatch {
            op: "distance_decay",
            lhs: x.shape().to_vec(),
            rhs: vec![d.len()],
        });
    }
    let f = decay_factors(d, lambda, d_max);
    Tensor::from_fn([len, c], |i| x.data()[i] * f[i / c])
}

/// The three learnable transition vectors and per-pattern mixing logits.
#[derive(Debug, Clone)]
pub struct DirectionalTransition<T: Element = f64> {
    pub a_forward: Var<T>,
    pub a_lateral: Var<T>,
    pub a_backward: Var<T>,
    /// `[2, 3]`: raster row, zigzag row.
    pub logits: Var<T>,
}

impl<T: Element> DirectionalTransition<T> {
    pub fn new(init: &mut Init, d_state: usize) -> Self {
        let around = |init: &mut Init, centre: f64| {
            let noise: Tensor<T> = init.uniform([d_state], 0.5);
            Var::param(noise.map("init", |v| v + T::lit(centre)).expect("finite init"))
        };
        let logits: Vec<T> = RASTER_INIT.iter().chain(&ZIGZAG_INIT).map(|w| T::lit(w.ln())).collect();
        Self {
            a_forward: around(init, 1.0),
            a_lateral: around(init, 0.0),
            a_backward: around(init, -1.0),
            logits: Var::param(Tensor::new([2, 3], logits).expect("finite init")),
        }
    }

    pub fn d_state(&self) -> usize {
        self.a_forward.shape()[0]
    }

    /// Softmax weights `[1, 3]` for one pattern.
    pub fn weights(&self, pattern: ScanPattern) -> Result<Var<T>> {
        self.logits.gather_rows(Arc::from([pattern_row(pattern)]))?.softmax()
    }

    /// `A = w_fw A_forward + w_lat A_lateral + w_bw A_backward`.
    pub fn combine(&self, pattern: ScanPattern) -> Result<Var<T>> {
        let w = self.weights(pattern)?;
        let mut acc: Option<Var<T>> = None;
        for (k, a) in [&self.a_forward, &self.a_lateral, &self.a_backward].into_iter().enumerate() {
            let wk = w.slice_last(k, 1)?.reshape([1])?;
            let term = a.mul(&wk)?;
            acc = Some(match acc {
                None => term,
                Some(s) => s.add(&term)?,
            });
        }
        Ok(acc.expect("three directions"))
    }
}

impl<T: Element> Params<T> for DirectionalTransition<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        vec![
            ("a_forward".into(), &mut self.a_forward),
            ("a_lateral".into(), &mut self.a_lateral),
            ("a_backward".into(), &mut self.a_backward),
            ("logits".into(), &mut self.logits),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwareSsmConfig {
    pub channels: usize,
    pub d_state: usize,
    pub chunk_len: usize,
}

impl AwareSsmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            d_state: DEFAULT_D_STATE,
            chunk_len: DEFAULT_CHUNK,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AwareSsm<T: Element = f64> {
    pub pattern: ScanPattern,
    pub chunk_len: usize,
    /// Softplus pre-image of λ, shape `[1]`.
    pub lambda_raw: Var<T>,
    pub transition: DirectionalTransition<T>,
    pub w_b: Linear<T>,
    pub w_c: Linear<T>,
    pub w_delta: Linear<T>,
    pub w_out: Linear<T>,
}

impl<T: Element> AwareSsm<T> {
    pub fn new(init: &mut Init, cfg: AwareSsmConfig, pattern: ScanPattern) -> Self {
        let (c, s) = (cfg.channels, cfg.d_state);
        // softplus(ln(e - 1)) = 1
        let lambda0 = (std::f64::consts::E - 1.0).ln();
        Self {
            pattern,
            chunk_len: cfg.chunk_len,
            lambda_raw: Var::param(Tensor::full([1], T::lit(lambda0))),
            transition: DirectionalTransition::new(init, s),
            w_b: Linear::new(init, c, s, false),
            w_c: Linear::new(init, c, s, false),
            w_delta: Linear::new(init, c, s, true),
            w_out: Linear::new(init, s, c, false),
        }
    }

    pub fn lambda(&self) -> Result<Var<T>> {
        self.lambda_raw.softplus()
    }

    /// Decayed input `x'` for `x: [L, C]` and sequence-ordered distances.
    pub fn decay(&self, x: &Var<T>, d: &[f64], d_max: f64) -> Result<Var<T>> {
        let len = x.shape()[0];
        if d.len() != len {
            return Err(Error::ShapeMismatch {
                op: "aware_ssm",
                lhs: x.shape().to_vec(),
                rhs: vec![d.len()],
            });
        }
        let neg: Vec<T> = decay_ratios(d, d_max).iter().map(|&r| T::lit(-r)).collect();
        let ratio = Var::constant(Tensor::new([len, 1], neg)?);
        let scale = ratio.mul(&self.lambda()?)?.exp()?;
        x.mul(&scale)
    }

    /// Gates and drive of the recurrence, both `[L, S]`.
    pub fn gates_and_drive(&self, x: &Var<T>, d: &[f64], d_max: f64) -> Result<(Var<T>, Var<T>)> {
        let xd = self.decay(x, d, d_max)?;
        let b = self.w_b.forward(&xd)?;
        let c = self.w_c.forward(&xd)?;
        let delta = self.w_delta.forward(&xd)?;
        let a = self.transition.combine(self.pattern)?;
        Ok((delta.add(&a)?.sigmoid()?, b.mul(&c)?))
    }

    pub fn forward(&self, x: &Var<T>, d: &[f64], d_max: f64) -> Result<Var<T>> {
        let [_, c] = x.value().dims2("aware_ssm")?;
        if c != self.w_b.d_in() {
            return Err(Error::ShapeMismatch {
                op: "aware_ssm",
                lhs: x.shape().to_vec(),
                rhs: vec![self.w_b.d_in()],
            });
        }
        let (gates, drive) = self.gates_and_drive(x, d, d_max)?;
        let h = linear_scan(&gates, &drive, self.chunk_len)?;
        self.w_out.forward(&h)
    }
}

impl<T: Element> Params<T> for AwareSsm<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = vec![("lambda_raw".to_string(), &mut self.lambda_raw)];
        out.extend(nested("transition", self.transition.params_mut()));
        out.extend(nested("w_b", self.w_b.params_mut()));
        out.extend(nested("w_c", self.w_c.params_mut()));
        out.extend(nested("w_delta", self.w_delta.params_mut()));
        out.extend(nested("w_out", self.w_out.params_mut()));
        out
    }
}
