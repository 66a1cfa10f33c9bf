//! Adam with decoupled (AdamW-style) weight decay.

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Parameters, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Self { config, step: 0, first_moment: zeros(), second_moment: zeros() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update over every parameter holding a gradient,
/// then clears all gradients.
///
/// Gradients are validated before any parameter changes, so a non-finite
/// gradient leaves the store untouched.
pub fn adam_step(params: &mut Parameters, state: &mut AdamState) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.step += 1;
    let AdamConfig { lr, weight_decay, beta1, beta2, eps } = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else { continue };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (k, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
        }
    }
    params.zero_grads();
    Ok(())
}
