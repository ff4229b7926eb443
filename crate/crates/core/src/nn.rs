//! Parameter containers and small layers shared by the network modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// A module owning named trainable vars.
pub trait Params<T: Element> {
    /// Every parameter with a stable dotted name, in a fixed order.
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)>;

    /// Looks a parameter up by name.
    fn param(&mut self, name: &str) -> Option<Var<T>> {
        self.params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    }

    fn param_names(&mut self) -> Vec<String> {
        self.params_mut().into_iter().map(|(n, _)| n).collect()
    }

    fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, v)| v.value().len()).sum()
    }

    /// Turns every parameter into a constant so forward passes record nothing.
    fn freeze(&mut self) {
        for (_, v) in self.params_mut() {
            *v = v.detach();
        }
    }

    /// Makes every parameter trainable again.
    fn unfreeze(&mut self) {
        for (_, v) in self.params_mut() {
            *v = Var::param(v.value().clone());
        }
    }
}

/// Prefixes child parameter names with `prefix.`.
pub fn nested<'a, T: Element>(prefix: &str, child: Vec<(String, &'a mut Var<T>)>) -> Vec<(String, &'a mut Var<T>)> {
    child.into_iter().map(|(n, v)| (format!("{prefix}.{n}"), v)).collect()
}

/// Deterministic initializer: every draw comes from one seeded stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a sub-module, derived from this one.
    pub fn fork(&mut self) -> Self {
        Self::new(self.rng.random())
    }

    pub fn uniform<T: Element>(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor<T> {
        let shape = shape.into();
        let n = crate::tensor::numel(&shape);
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect();
        Tensor::from_parts(shape, data)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in<T: Element>(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor<T> {
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// `y = x W + b` over rows of a `[N, in]` input.
#[derive(Debug, Clone)]
pub struct Linear<T: Element = f64> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Var::param(init.fan_in([d_in, d_out], d_in)),
            bias: bias.then(|| Var::param(init.fan_in([d_out], d_in))),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Var::param(Tensor::zeros([d_in, d_out])),
            bias: bias.then(|| Var::param(Tensor::zeros([d_out]))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Element> Params<T> for Linear<T> {
    fn params_mut(&mut self) -> Vec<(String, &mut Var<T>)> {
        let mut out = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }
}

/// Applies `f` to an `[H, W, C]` var as `[H*W, C]` rows.
pub fn per_cell<T: Element>(x: &Var<T>, f: impl FnOnce(&Var<T>) -> Result<Var<T>>) -> Result<Var<T>> {
    let [h, w, c] = x.value().dims3("per_cell")?;
    let y = f(&x.reshape([h * w, c])?)?;
    let c_out = y.shape()[1];
    y.reshape([h, w, c_out])
}

/// Global average pool of `[H, W, C]` to `[1, C]`.
pub fn global_avg_pool<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let [h, w, c] = x.value().dims3("global_avg_pool")?;
    x.reshape([h * w, c])?.mean_axis(0)?.reshape([1, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let a: Tensor = Init::new(7).uniform([3, 4], 1.0);
        let b: Tensor = Init::new(7).uniform([3, 4], 1.0);
        let c: Tensor = Init::new(8).uniform([3, 4], 1.0);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn linear_forward_and_names() {
        let mut lin = Linear::<f64>::zeros(2, 3, true);
        lin.weight = Var::param(Tensor::new([2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap());
        lin.bias = Some(Var::param(Tensor::new([3], vec![0.5, 0.5, 0.5]).unwrap()));
        let x = Var::constant(Tensor::new([1, 2], vec![2.0, 3.0]).unwrap());
        assert_eq!(lin.forward(&x).unwrap().value().data(), &[2.5, 3.5, 1.5]);
        assert_eq!(lin.param_names(), vec!["weight", "bias"]);
        lin.freeze();
        assert!(!lin.weight.requires_grad());
    }
}
