use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function. This is the
/// analysis-free oracle the analytic gradients are verified against: it
/// knows nothing about the record, it only evaluates `f`.
pub fn finite_diff_gradient<E: Scalar>(
    f: &mut dyn FnMut(&Tensor<E>) -> Result<E>,
    x: &Tensor<E>,
    h: f64,
) -> Result<Tensor<E>> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {h}")));
    }
    let he = E::from_f64(h);
    let two_h = E::from_f64(2.0 * h);
    let mut grad = vec![E::zero(); x.numel()];
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] = xp.data()[i] + he;
        let fp = f(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] = xm.data()[i] - he;
        let fm = f(&xm)?;
        grad[i] = (fp - fm) / two_h;
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Largest relative deviation between an analytic gradient and the oracle,
/// normalized by the oracle's largest magnitude (floored at 1 so that
/// near-zero gradients are compared absolutely).
pub fn max_rel_err<E: Scalar>(analytic: &Tensor<E>, oracle: &Tensor<E>) -> f64 {
    let scale = oracle.max_abs().max(1.0);
    analytic.max_abs_diff(oracle) / scale
}
