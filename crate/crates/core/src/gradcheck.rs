//! Central finite-difference gradient checker.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms, since central differences at `FD_STEP` carry roundoff
/// around `1e-10 · |loss|`.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat element index with the largest relative error.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradients written by `backward` against central
/// differences of `loss`, for every scalar of every parameter in `store`.
///
/// `backward` is called once on zeroed gradients and must accumulate
/// `d loss / d param` into the store's gradient slots.
pub fn grad_check<L, B>(
    name: &str,
    store: &mut ParamStore,
    mut loss: L,
    mut backward: B,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
    B: FnMut(&mut ParamStore) -> Result<()>,
{
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("{name}: loss at base point is {base}")));
    }
    store.zero_grads();
    backward(store)?;
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = store.params()[pi].value.data()[ei];
            store.params_mut()[pi].value.data_mut()[ei] = orig + FD_STEP;
            let plus = loss(store)?;
            store.params_mut()[pi].value.data_mut()[ei] = orig - FD_STEP;
            let minus = loss(store)?;
            store.params_mut()[pi].value.data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name}: loss became non-finite perturbing {}[{ei}]",
                    store.params()[pi].name
                )));
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.params()[pi].name.clone(), ei));
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
