//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters. Defaults: lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer owning one moment pair per parameter slot. The slot order must
/// stay stable across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    states: Vec<AdamState>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam::with_params(AdamParams {
            lr,
            ..AdamParams::default()
        })
    }

    pub fn with_params(params: AdamParams) -> Self {
        Adam {
            params,
            states: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Every tensor must carry a populated
    /// gradient; call [`Tensor::zero_grad`] afterwards to reset accumulation.
    pub fn step(&mut self, tensors: &mut [&mut Tensor]) -> Result<()> {
        if self.states.is_empty() {
            self.states = tensors
                .iter()
                .map(|t| AdamState {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                })
                .collect();
        }
        if self.states.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "adam saw {} parameters, expected {}",
                tensors.len(),
                self.states.len()
            )));
        }
        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (tensor, state) in tensors.iter_mut().zip(&mut self.states) {
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Contract("adam step with missing gradient".into()))?
                .to_vec();
            if grad.len() != state.m.len() {
                return Err(Error::Dimension(
                    "parameter shape changed between adam steps".into(),
                ));
            }
            let values = tensor.values_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / bias1;
                let v_hat = state.v[i] / bias2;
                values[i] -= self.params.lr * m_hat / (v_hat.sqrt() + self.params.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Tensor {
        Tensor::new(1, values.len(), values).unwrap().with_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = param(vec![1.0, -2.0, 3.0]);
        p.accumulate_grad(None).unwrap(); // zeros
        let before = p.values().to_vec();
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &before[..]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With constant gradient g, bias-corrected m_hat = g, v_hat = g^2,
        // so the first update is lr * g / (|g| + eps) = lr * sign(g).
        let mut p = param(vec![0.0]);
        p.accumulate_grad(Some(&[3.5])).unwrap();
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] + 0.01).abs() < 1e-8, "got {}", p.values()[0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = x^2, grad = 2x.
        let mut x = param(vec![1.7]);
        let mut opt = Adam::new(0.05);
        for _ in 0..200 {
            let g = 2.0 * x.values()[0];
            x.zero_grad();
            x.accumulate_grad(Some(&[g])).unwrap();
            opt.step(&mut [&mut x]).unwrap();
        }
        assert!(x.values()[0].abs() < 1e-2, "x = {}", x.values()[0]);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = param(vec![1.0]);
        let mut opt = Adam::new(0.01);
        assert!(opt.step(&mut [&mut p]).is_err());
    }
}
