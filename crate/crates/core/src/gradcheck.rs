//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::tensor::{Gradients, ParamStore};

/// Magnitudes below this are compared on an absolute rather than relative scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares `grads` against `(f(p + h) − f(p − h)) / 2h` for every element of
/// every parameter. Parameters missing from `grads` are taken to have zero
/// gradient.
pub fn check(
    params: &ParamStore,
    grads: &Gradients,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_owned();
                report.worst_index = j;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
