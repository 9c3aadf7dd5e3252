//! Adam with decoupled weight decay, and the SAM ascent step.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, MergeError, Result};

/// Below this gradient norm the SAM perturbation is zero.
pub const SAM_GRAD_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `x ← (1 − lr·wd) x` before the moment step.
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Standard Adam at `lr = 1e-3`.
    pub fn plain() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Base optimiser underneath SAM.
    pub fn sam_base() -> Self {
        AdamConfig {
            beta2: 0.99,
            weight_decay: 5e-4,
            ..Self::plain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr * self.weight_decay < 1.0;
        if ok {
            Ok(())
        } else {
            Err(MergeError::InvalidConfig(format!(
                "bad Adam settings {self:?}"
            )))
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::plain()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        AdamState {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `x` in place.
pub fn adam_step(state: &mut AdamState, x: &mut [f64], grad: &[f64]) -> Result<()> {
    if x.len() != state.m.len() || grad.len() != x.len() {
        return Err(dim_err(format!(
            "adam_step: state {} params {} grad {}",
            state.m.len(),
            x.len(),
            grad.len()
        )));
    }
    let c = state.cfg;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        x[i] = x[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MergeError::NonFinite("adam_step"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    pub base: AdamConfig,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            rho: 0.07,
            base: AdamConfig::sam_base(),
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(MergeError::InvalidConfig(format!(
                "rho {} must be >= 0",
                self.rho
            )));
        }
        self.base.validate()
    }
}

/// `ε = ρ g / ‖g‖₂`, or zero when `‖g‖₂ ≤ 1e-12`.
pub fn sam_ascent(grad: &[f64], rho: f64) -> Vec<f64> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= SAM_GRAD_GUARD {
        return vec![0.0; grad.len()];
    }
    grad.iter().map(|g| rho * g / norm).collect()
}
