//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates the loss through the forward path only, so it
//! stays independent of the backward implementation it validates.

use crate::scalar::Scalar;

use super::Tensor;

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central finite-difference gradient of `loss_fn` with respect to every
/// element of `inputs`.
pub fn central_difference<T: Scalar>(
    inputs: &[Tensor<T>],
    eps: T,
    mut loss_fn: impl FnMut(&[Tensor<T>]) -> T,
) -> Vec<Tensor<T>> {
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(&inputs[ti].shape);
        for i in 0..inputs[ti].numel() {
            let orig = work[ti].data[i];
            work[ti].data[i] = orig + eps;
            let plus = loss_fn(&work);
            work[ti].data[i] = orig - eps;
            let minus = loss_fn(&work);
            work[ti].data[i] = orig;
            g.data[i] = (plus - minus) / (T::lit(2.0) * eps);
        }
        grads.push(g);
    }
    grads
}

/// Max relative error between analytic and finite-difference gradients,
/// `|a - fd| / max(1, |a|, |fd|)` elementwise.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, fd: &Tensor<T>) -> T {
    assert_eq!(analytic.shape, fd.shape);
    let mut worst = T::zero();
    for (&a, &f) in analytic.data.iter().zip(fd.data.iter()) {
        let scale = T::one().max(a.abs()).max(f.abs());
        worst = worst.max((a - f).abs() / scale);
    }
    worst
}
