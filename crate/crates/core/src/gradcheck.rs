//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{ParamGraph, Tape, Var};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;

/// Relative discrepancy used by the checks: `|a − c| / (|a| + |c| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + DENOM_FLOOR)
}

/// Compares the backward pass of the scalar `loss` against central differences with
/// step `step` on every parameter scalar of `graph`; returns the maximum relative error.
///
/// `graph` is restored to its original values on return.
pub fn finite_diff_check<F>(graph: &mut ParamGraph, loss: F, step: f64) -> Result<f64>
where
    F: Fn(&ParamGraph, &mut Tape) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step {step}")));
    }
    let mut tape = Tape::new();
    let out = loss(graph, &mut tape)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_diff_check", &[1], tape.value(out).shape()));
    }
    graph.backward(&tape, out, &Tensor::scalar(1.0))?;
    let analytic = graph.flat_grads().ok_or(Error::GradientsMissing)?;
    graph.clear_grads();

    let base = graph.flat_values();
    let eval = |graph: &mut ParamGraph, values: &[f64]| -> Result<f64> {
        graph.set_flat_values(values)?;
        let mut tape = Tape::new();
        let out = loss(graph, &mut tape)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    let result = (|| {
        for i in 0..base.len() {
            probe[i] = base[i] + step;
            let up = eval(graph, &probe)?;
            probe[i] = base[i] - step;
            let down = eval(graph, &probe)?;
            probe[i] = base[i];
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        Ok(worst)
    })();
    graph.set_flat_values(&base)?;
    result
}
