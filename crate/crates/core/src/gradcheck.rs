//! Central finite-difference gradient checking.

use crate::error::{PanError, Result};
use crate::tensor::Tensor;

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the loss at the given parameters and returns it together
/// with the analytic gradient of every parameter tensor (same order, same
/// lengths). Returns the maximum over all entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(PanError::Parameter(format!("grad_check eps must be > 0, got {eps}")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(PanError::Numerical(format!("loss is not finite at the base point: {loss}")));
    }
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(g, p)| g.len() != p.len()) {
        return Err(PanError::Contract("gradient layout does not match parameters".into()));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..params.len() {
        for ei in 0..params[ti].len() {
            let orig = params[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let (plus, _) = f(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let (minus, _) = f(&work)?;
            work[ti].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(PanError::Numerical(format!(
                    "loss is not finite when perturbing parameter {ti}[{ei}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][ei];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
