//! Adam optimizer over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place. `lr_scale`, when given, multiplies the learning
/// rate per parameter (used for the reduced encoder rate in fine-tuning).
pub fn adam_step(
    theta: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    if theta.len() != grads.len() || theta.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, state of {}",
            theta.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(scale) = lr_scale {
        if scale.len() != theta.len() {
            return Err(Error::Shape("adam_step: lr_scale length mismatch".into()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let lr = hyper.lr * lr_scale.map_or(1.0, |s| s[i]);
        theta[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}
