use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            weight_decay: 5e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay: the decay
/// `p -= lr * wd * p` is applied before the adaptive update.
pub fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.data.len();
    if grads.data.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} parameters"),
            actual: format!("grads {}, moments {}/{}", grads.data.len(), state.m.len(), state.v.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads.data[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let p = &mut params.data[i];
        *p -= lr * cfg.weight_decay * *p;
        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Halves `base` every 5 epochs (epochs count from 0).
pub fn lr_at_epoch(base: f64, epoch: u32) -> f64 {
    base * 0.5f64.powi((epoch / 5) as i32)
}
