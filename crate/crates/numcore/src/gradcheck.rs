//! Central finite-difference verification of reverse-mode gradients.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::NumError;

/// Denominator floor for the relative error, so that coordinates whose
/// true gradient is ~0 are judged on absolute error at this scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `backward()` against `(f(θ+δ) − f(θ−δ)) / 2δ` for every
/// scalar parameter in `params`.
///
/// `loss` must build a deterministic one-element loss on the given tape.
pub fn finite_diff_check<E, F>(params: &mut ParamStore, step: f64, mut loss: F) -> Result<GradCheckReport, E>
where
    E: From<NumError>,
    F: FnMut(&mut Tape<'_>) -> Result<Var, E>,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::with_params(store);
        let l = loss(&mut tape)?;
        tape.value(l)
            .item()
            .ok_or_else(|| NumError::NonScalarLoss(tape.shape(l).to_vec()).into())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    for id in params.ids().collect::<Vec<_>>() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.param(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
