//! Dense `f64` arrays, the differentiable kernels the model is built from,
//! and a central-difference gradient checker.

mod array;
pub mod kernels;
mod tape;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use array::{dot, Array2, Axis};
pub use tape::{Backward, Gradients, Tape, Var};

use crate::error::{Error, Result};

pub fn matmul(a: &Array2, b: &Array2) -> Result<Array2> {
    a.matmul(b)
}

/// Numerically stable softmax (max-subtracted) along `axis`.
pub fn softmax_over(a: &Array2, axis: Axis) -> Array2 {
    kernels::softmax(a, axis)
}

/// Mean over rows of `−Σ y·ln p`, with `p` clamped at [`kernels::LOG_EPS`].
pub fn cross_entropy(p: &Array2, y: &Array2) -> Result<f64> {
    kernels::cross_entropy(p, y)
}

pub fn l2_normalize(v: &Array2) -> Result<Array2> {
    kernels::l2_normalize_rows(v)
}

/// Element-wise GELU.
pub fn activation(x: &Array2) -> Array2 {
    x.map(kernels::gelu)
}

/// Named trainable arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(BTreeMap<String, Array2>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.0.values().map(|a| a.data().len()).sum()
    }

    /// Registers every parameter on `tape` and returns the name → handle map.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.0
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(name.clone(), value.clone())))
            .collect()
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.0
            .iter()
            .map(|(name, value)| (name.clone(), tape.constant(value.clone())))
            .collect()
    }
}

/// A scalar function of a [`ParamSet`] with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Gradients)>;
}

/// Worst-case comparison for a single parameter array.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `objective` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on every coordinate of every parameter.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamSet,
    eps: f64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let (value, grads) = objective.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
    };
    for (name, base) in params.iter() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for parameter `{name}`")))?;
        if analytic.shape() != base.shape() {
            return Err(crate::error::dim_err(
                "grad_check",
                format!("gradient {:?} for parameter {:?}", analytic.shape(), base.shape()),
            ));
        }
        let mut worst = ParamCheck {
            name: name.clone(),
            worst_index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            rel_error: 0.0,
        };
        for idx in 0..base.data().len() {
            let original = base.data()[idx];
            let set = |p: &mut ParamSet, v: f64| {
                p.get_mut(name).expect("param present").data_mut()[idx] = v;
            };
            set(&mut probe, original + eps);
            let plus = objective.value(&probe)?;
            set(&mut probe, original - eps);
            let minus = objective.value(&probe)?;
            set(&mut probe, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective at {name}[{idx}]")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if err > worst.rel_error || idx == 0 {
                worst.worst_index = (idx / base.cols(), idx % base.cols());
                worst.analytic = a;
                worst.numeric = numeric;
                worst.rel_error = err;
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst.rel_error);
        report.params.push(worst);
    }
    Ok(report)
}
