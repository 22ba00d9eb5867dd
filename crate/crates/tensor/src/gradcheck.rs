//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on fresh tapes, so it is
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over entries with |analytic| > `near_zero`.
    pub max_rel_err: f64,
    /// Largest absolute error over entries with |analytic| <= `near_zero`.
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err < rel_tol && self.max_abs_err < abs_tol
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const NEAR_ZERO: f64 = 1e-6;

/// Compares the gradient of the scalar built by `f` with respect to every
/// element of every input against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        })
        .collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs();
            if a.abs() > NEAR_ZERO {
                report.max_rel_err = report.max_rel_err.max(err / a.abs().max(numeric.abs()));
            } else {
                report.max_abs_err = report.max_abs_err.max(err);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
