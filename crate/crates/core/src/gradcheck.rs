//! Central finite-difference oracle for tape gradients.

use alloc::string::String;

use crate::error::Result;
use crate::model::ParamStore;
use crate::tape::{GradientMap, Tape, Var};
use crate::tensor::Tensor;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
#[inline]
pub fn relative_error(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(1e-8)
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of one tensor.
pub fn central_difference<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

/// Outcome of comparing tape gradients with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

/// Compare the tape gradient of `build` with central differences over every
/// coordinate of every parameter in `params`.
///
/// `build` must be a deterministic function of the parameters (eval-mode
/// stochastic layers, fixed rng).
pub fn finite_difference_check<F>(params: &ParamStore, eps: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    let analytic: GradientMap = tape.backward(loss)?.param_map();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    for id in params.ids() {
        let len = params.get(id).len();
        for k in 0..len {
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe, &mut build)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe, &mut build)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(&id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(exact, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = String::from(params.name(id));
            }
        }
    }
    Ok(report)
}

fn eval<F>(params: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = build(params, &mut tape)?;
    Ok(tape.value(v).item())
}
