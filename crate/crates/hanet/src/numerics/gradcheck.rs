//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::optim::ParamTensors;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compare the analytic gradient of every parameter scalar against central
/// differences of the loss. `loss_fn(p, want_grads)` must be deterministic
/// for fixed inputs (fix all rng counters before calling) and return
/// slot-aligned gradients when asked.
///
/// The numeric side uses the 4th-order five-point central stencil
/// (-f(2e) + 8 f(e) - 8 f(-e) + f(-2e)) / (12 e), which keeps the rounding
/// noise floor below the 1e-8-floored relative tolerance even for
/// parameters whose true gradient is many orders smaller than the loss.
///
/// Relative error per scalar: |a - n| / max(|a|, |n|, 1e-8).
pub fn finite_diff_check<P, F>(
    loss_fn: F,
    params: &P,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    P: ParamTensors + Clone,
    F: Fn(&P, bool) -> Result<(f64, Option<Vec<Matrix>>)>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(
            "finite_diff_check: epsilon must be positive".to_string(),
        ));
    }
    if tolerance <= 0.0 {
        return Err(Error::InvalidArgument(
            "finite_diff_check: tolerance must be positive".to_string(),
        ));
    }

    let (l0, _) = loss_fn(params, false)?;
    let (l1, _) = loss_fn(params, false)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "loss_fn is not deterministic under fixed rng: {l0} vs {l1}"
        )));
    }

    let (_, grads) = loss_fn(params, true)?;
    let grads = grads.ok_or_else(|| {
        Error::CheckInvalid("loss_fn returned no gradients when asked".to_string())
    })?;
    let names = params.tensor_names();
    if grads.len() != names.len() {
        return Err(Error::CheckInvalid(format!(
            "analytic gradients cover {} slots, expected {}",
            grads.len(),
            names.len()
        )));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        pass: true,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };

    for slot in 0..names.len() {
        let len = params.tensors()[slot].len();
        if grads[slot].len() != len {
            return Err(Error::CheckInvalid(format!(
                "gradient shape mismatch on {}",
                names[slot]
            )));
        }
        for i in 0..len {
            let orig = work.tensors()[slot].data()[i];
            let mut eval_at = |delta: f64| -> Result<f64> {
                work.tensors_mut()[slot].data_mut()[i] = orig + delta;
                let (l, _) = loss_fn(&work, false)?;
                Ok(l)
            };
            let lp2 = eval_at(2.0 * epsilon)?;
            let lp1 = eval_at(epsilon)?;
            let lm1 = eval_at(-epsilon)?;
            let lm2 = eval_at(-2.0 * epsilon)?;
            work.tensors_mut()[slot].data_mut()[i] = orig;

            let numeric = (-lp2 + 8.0 * lp1 - 8.0 * lm1 + lm2) / (12.0 * epsilon);
            let analytic = grads[slot].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = names[slot].to_string();
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}
