//! Central-difference verification harness for analytic gradients.

use crate::autodiff::graph::{GradientMap, ParamMap};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Outcome of a finite-difference sweep over every parameter coordinate.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    /// parameter name and flat index of the worst coordinate
    pub worst_coordinate: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

/// Compare the analytic gradient of a scalar function against central
/// finite differences at `params`.
///
/// `grad_fn` is evaluated once at the base point; `value_fn` is evaluated
/// twice per coordinate with that coordinate perturbed by ±`step`.
/// Perturbed coordinates are restored to their exact original bits.
pub fn finite_difference_check<V, G>(
    mut value_fn: V,
    mut grad_fn: G,
    params: &ParamMap,
    step: f64,
) -> Result<FdReport>
where
    V: FnMut(&ParamMap) -> Result<f64>,
    G: FnMut(&ParamMap) -> Result<(f64, GradientMap)>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("fd step must be positive, got {}", step)));
    }
    let mut work = params.clone();
    let (_, grads) = grad_fn(&work)?;

    let mut max_rel_err = 0.0_f64;
    let mut worst = None;
    let mut checked = 0usize;

    let names: Vec<String> = work.keys().cloned().collect();
    for name in names {
        let n = work[&name].len();
        for idx in 0..n {
            let original = work[&name].data()[idx];

            work.get_mut(&name).unwrap().data_mut()[idx] = original + step;
            let f_plus = value_fn(&work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = original - step;
            let f_minus = value_fn(&work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = original;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric(
                    "finite_difference_check",
                    format!("non-finite probe value at {}[{}]", name, idx),
                ));
            }

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let analytic = grads
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("gradient missing for parameter {:?}", name)))?
                .data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), idx));
            }
            checked += 1;
        }
    }

    Ok(FdReport { max_rel_err, worst_coordinate: worst, coordinates_checked: checked })
}
