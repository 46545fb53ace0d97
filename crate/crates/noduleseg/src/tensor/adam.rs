//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first and second moment buffers plus the step counter.
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// One bias-corrected update over named parameters. `grads` must hold
    /// one same-shape gradient per parameter.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = S::of_f64(self.config.lr);
        let b1 = S::of_f64(self.config.beta1);
        let b2 = S::of_f64(self.config.beta2);
        let eps = S::of_f64(self.config.eps);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        for (name, param) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| {
                Error::InvalidUse(format!("missing gradient for parameter {}", name))
            })?;
            if grad.shape() != param.shape() {
                return Err(Error::InvalidShape(format!(
                    "gradient shape {:?} does not match parameter {} shape {:?}",
                    grad.shape(),
                    name,
                    param.shape()
                )));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape()));
            for ((pv, &gv), (mv, vv)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor<f64>) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), t);
        m
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = single("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let grads = single("w", Tensor::zeros(&[3]));
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_delta_is_minus_lr() {
        let cfg = AdamConfig::default();
        let mut params = single("w", Tensor::scalar(1.0));
        let grads = single("w", Tensor::scalar(1.0));
        let mut state = AdamState::new(cfg);
        state.step(&mut params, &grads).unwrap();
        // m_hat = v_hat = 1, so delta = -lr / (1 + eps)
        let expected = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((params["w"].item() - expected).abs() < 1e-12);
    }

    #[test]
    fn converges_on_quadratic() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut params = single("x", Tensor::scalar(1.0));
        let mut state = AdamState::new(cfg);
        for _ in 0..100 {
            let x = params["x"].item();
            let grads = single("x", Tensor::scalar(2.0 * x));
            state.step(&mut params, &grads).unwrap();
        }
        assert!(params["x"].item().abs() < 0.1, "x = {}", params["x"].item());
        assert_eq!(state.step, 100);
    }
}
