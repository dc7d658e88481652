//! Adam optimizer with bias correction.

use crate::scalar::Scalar;

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }
}

/// One Adam update over all parameters. Fails fast (before mutating
/// anything) on a non-finite gradient, naming the parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[&str],
    state: &mut AdamState<T>,
) -> Result<(), AutodiffError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient(
                names.get(i).unwrap_or(&"?").to_string(),
            ));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::lit(state.cfg.beta1);
    let b2 = T::lit(state.cfg.beta2);
    let one = T::one();
    let corr1 = T::lit(1.0 - state.cfg.beta1.powf(t));
    let corr2 = T::lit(1.0 - state.cfg.beta2.powf(t));
    let lr = T::lit(state.cfg.lr);
    let eps = T::lit(state.cfg.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            let mhat = m.data[i] / corr1;
            let vhat = v.data[i] / corr2;
            p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        adam_step(&mut [&mut p], &[g], &["p"], &mut state).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With bias correction, step 1 moves each weight by lr (up to eps).
        let mut p = Tensor::from_vec(&[3], vec![0.5f64, 0.5, 0.5]);
        let g = Tensor::from_vec(&[3], vec![10.0, -0.3, 1e-3]);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(&[&p], cfg);
        adam_step(&mut [&mut p], &[g.clone()], &["p"], &mut state).unwrap();
        for (i, v) in p.data.iter().enumerate() {
            let moved = (v - 0.5).abs();
            assert!((moved - 1e-3).abs() < 1e-6, "param {i} moved {moved}");
            assert_eq!((v - 0.5).signum(), -g.data[i].signum());
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = Tensor::from_vec(&[2], vec![0.1f64, 0.9]);
            let mut state = AdamState::new(&[&p], AdamConfig::default());
            for step in 0..50 {
                let g = Tensor::from_vec(&[2], vec![0.01 * step as f64, -0.3]);
                adam_step(&mut [&mut p], &[g], &["p"], &mut state).unwrap();
            }
            p.data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_fails_with_name() {
        let mut p = Tensor::from_vec(&[1], vec![0.0f64]);
        let g = Tensor::from_vec(&[1], vec![f64::NAN]);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        let err = adam_step(&mut [&mut p], &[g], &["psi.enc0.weight"], &mut state).unwrap_err();
        assert!(format!("{err}").contains("psi.enc0.weight"));
        // Fail-fast: nothing mutated.
        assert_eq!(state.step, 0);
        assert_eq!(p.data[0], 0.0);
    }
}
