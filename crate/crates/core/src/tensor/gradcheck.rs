//! Central finite-difference check of tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub eps: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel: 1e-3,
            abs: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let scale = analytic.abs().max(numeric.abs());
        (analytic - numeric).abs() <= self.abs.max(self.rel * scale)
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares backward gradients of `loss_fn` against central differences for
/// every scalar of every parameter in `store`.
///
/// Parameters that receive no gradient are checked against an analytic zero.
pub fn check_params<F>(store: &ParamStore, tol: Tolerance, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let analytic = tape.backward(loss)?.for_params(store);

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (id, name, value) in store.iter() {
        let grad = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + tol.eps;
            let plus = eval(&probe, &loss_fn)?;
            probe.get_mut(id).data_mut()[i] = orig - tol.eps;
            let minus = eval(&probe, &loss_fn)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * tol.eps);
            let a = grad.data()[i];
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if !tol.accepts(a, numeric) {
                report.mismatches.push(Mismatch {
                    param: name.to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    Ok(tape.value(loss).item())
}
