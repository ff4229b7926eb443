#![allow(dead_code)]

use gmfuse_core::autograd::Var;
use gmfuse_core::nn::{Init, Params};
use gmfuse_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).unwrap()
}

/// Replaces every parameter with seeded values in `±bound`.
pub fn randomize<M: Params<f64>>(model: &mut M, seed: u64, bound: f64) {
    let mut init = Init::new(seed);
    for (_, v) in model.params_mut() {
        *v = Var::param(init.uniform(v.shape().to_vec(), bound));
    }
}

/// `sum(y * r)` for a fixed random `r` of `y`'s shape.
pub fn probe(y: &Var, seed: u64) -> Result<Var> {
    let mut g = rng(seed);
    let r = Var::constant(uniform(y.shape(), -1.0, 1.0, &mut g));
    y.mul(&r)?.sum_all()
}
