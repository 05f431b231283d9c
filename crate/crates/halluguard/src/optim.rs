//! Adam with bias correction, operating on named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update in place. Returns the largest |update| applied, which
/// callers can log; it stays within lr·(1−β1)/√(1−β2) of zero for any
/// gradient history (≈3.16·lr at the defaults) and within lr on the first
/// step from a fresh state.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step over {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam_step gradient".into()));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let mut max_update = 0.0f64;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let update = lr * m_hat / (v_hat.sqrt() + eps);
        params[i] -= update;
        max_update = max_update.max(update.abs());
    }
    Ok(max_update)
}

/// Keyed optimizer over a set of named parameters.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            states: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, params: &mut [f64], grads: &[f64], lr: f64) -> Result<f64> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(params.len()));
        adam_step(params, grads, state, lr, self.beta1, self.beta2, self.eps)
    }
}
