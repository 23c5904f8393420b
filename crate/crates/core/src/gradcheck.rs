//! Central-difference gradient verification for tape-recorded functions.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurs.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Scalar-valued function of several inputs, built on a fresh tape.
pub trait Objective: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> Objective for F {}

fn evaluate(f: &impl Objective, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε` over every coordinate of every input.
pub fn gradcheck_many(
    f: impl Objective,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradcheck objective must be scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = base - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = base;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`gradcheck_many`].
pub fn gradcheck(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    theta: &Tensor<f64>,
    eps: f64,
) -> Result<GradcheckReport> {
    gradcheck_many(
        move |tape: &mut Tape<f64>, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(theta),
        eps,
    )
}
