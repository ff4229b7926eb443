//! Central finite-difference checks of tape gradients.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

/// Finite-difference step used throughout the verification suites.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which relative error is measured against this floor.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Index of the worst entry with its analytic and numeric values.
    pub worst: (usize, f64, f64),
}

/// Which entries of a parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Entries {
    All,
    /// At most this many, evenly strided over the flat index.
    AtMost(usize),
}

impl Entries {
    fn indices(self, len: usize) -> Vec<usize> {
        match self {
            Self::All => (0..len).collect(),
            Self::AtMost(k) if k >= len => (0..len).collect(),
            Self::AtMost(k) => (0..k).map(|i| i * len / k).collect(),
        }
    }
}

fn scalar_value(v: &Var) -> Result<f64> {
    if v.value().len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.value().data()[0])
}

/// Compares the tape gradient of `loss` with respect to parameter `name`
/// against central differences with step `step`.
pub fn check_param<M: Params<f64>>(
    model: &mut M,
    name: &str,
    loss: impl Fn(&M) -> Result<Var>,
    entries: Entries,
    step: f64,
) -> Result<GradReport> {
    let original = model
        .param(name)
        .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))?;
    let out = loss(model)?;
    let analytic = out.backward()?.wrt(&original);

    let base = original.value().clone();
    let mut report = GradReport {
        name: name.to_string(),
        entries: 0,
        max_rel_error: 0.0,
        worst: (0, 0.0, 0.0),
    };
    for i in entries.indices(base.len()) {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut data = base.data().to_vec();
            data[i] += delta;
            set_param(model, name, Var::param(Tensor::new(base.shape().to_vec(), data)?));
            scalar_value(&loss(model)?)
        };
        let plus = eval(step)?;
        let minus = eval(-step)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric, REL_FLOOR);
        report.entries += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, a, numeric);
        }
    }
    set_param(model, name, original);
    Ok(report)
}

fn set_param<M: Params<f64>>(model: &mut M, name: &str, value: Var) {
    for (n, v) in model.params_mut() {
        if n == name {
            *v = value;
            return;
        }
    }
}

/// Checks a closure of explicit inputs rather than a module parameter.
pub fn check_input(x: &Tensor, loss: impl Fn(&Var) -> Result<Var>, step: f64) -> Result<GradReport> {
    let leaf = Var::param(x.clone());
    let analytic = loss(&leaf)?.backward()?.wrt(&leaf);
    let mut report = GradReport {
        name: "input".into(),
        entries: 0,
        max_rel_error: 0.0,
        worst: (0, 0.0, 0.0),
    };
    for i in 0..x.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut data = x.data().to_vec();
            data[i] += delta;
            scalar_value(&loss(&Var::constant(Tensor::new(x.shape().to_vec(), data)?))?)
        };
        let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric, REL_FLOOR);
        report.entries += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, a, numeric);
        }
    }
    Ok(report)
}
