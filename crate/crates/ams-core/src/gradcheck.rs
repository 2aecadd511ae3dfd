//! Finite-difference gradient checker.
//!
//! The verification backbone for every backward pass in this crate: the
//! checked function returns both a scalar value and its analytic gradient,
//! and the checker compares the gradient against central differences in
//! double precision.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor4;

/// Default perturbation step for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences.
///
/// `f` maps a tensor to `(scalar value, analytic gradient w.r.t. the tensor)`.
/// Returns the max over coordinates of
/// `|analytic - central_difference| / max(1, |central_difference|)`.
pub fn grad_check<F>(f: F, x: &Tensor4<f64>, step: f64) -> Result<f64>
where
    F: Fn(&Tensor4<f64>) -> Result<(f64, Tensor4<f64>)>,
{
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(CoreError::numerical(
            "grad_check",
            "function value is non-finite at the base point",
            None,
        ));
    }
    if analytic.dims() != x.dims() {
        return Err(CoreError::shape(
            "grad_check",
            format!(
                "analytic gradient dims {:?} do not match input dims {:?}",
                analytic.dims(),
                x.dims()
            ),
        ));
    }

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::numerical(
                "grad_check",
                format!("non-finite evaluation at coordinate {i}"),
                None,
            ));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
