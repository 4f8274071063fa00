use super::{Matrix, Tensor};
use crate::error::Result;

/// Compares the analytic gradient of a scalar function at `x` against
/// central differences with the given step.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::parameter(x.clone());
    f(&leaf)?.backward()?;
    let analytic = leaf.grad_or_zero();

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&Tensor::constant(probe.clone()))?.item()?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&Tensor::constant(probe.clone()))?.item()?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
