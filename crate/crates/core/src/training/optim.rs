use serde::{Deserialize, Serialize};

use crate::error::{check_len, NddeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
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

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. `lr_scale`, when given, multiplies
/// the learning rate per coordinate.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    check_len("adam gradient", params.len(), grads.len())?;
    if state.m.is_empty() && !params.is_empty() {
        *state = AdamState::new(params.len());
    }
    check_len("adam state", params.len(), state.m.len())?;
    if let Some(s) = lr_scale {
        check_len("adam learning-rate scale", params.len(), s.len())?;
    }
    if !(hyper.lr > 0.0) {
        return Err(NddeError::Config(format!("learning rate must be positive, got {}", hyper.lr)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let lr = hyper.lr * lr_scale.map_or(1.0, |s| s[i]);
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, lr_scale: Option<&[f64]>) -> Result<()> {
    check_len("sgd gradient", params.len(), grads.len())?;
    for i in 0..params.len() {
        params[i] -= lr * lr_scale.map_or(1.0, |s| s[i]) * grads[i];
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Adam(AdamHyper),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Self::Adam(h) => h.lr,
            Self::Sgd { lr } => *lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Self::Adam(h) => h.lr = lr,
            Self::Sgd { lr: l } => *l = lr,
        }
    }

    pub fn step(
        &self,
        params: &mut [f64],
        grads: &[f64],
        state: &mut AdamState,
        lr_scale: Option<&[f64]>,
    ) -> Result<()> {
        match self {
            Self::Adam(h) => adam_step(params, grads, state, h, lr_scale),
            Self::Sgd { lr } => sgd_step(params, grads, *lr, lr_scale),
        }
    }
}
