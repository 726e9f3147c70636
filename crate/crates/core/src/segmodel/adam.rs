use serde::{Deserialize, Serialize};

use super::{ModelError, ModelParams};
use crate::numkit::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<(), ModelError> {
    let shapes_match = params.config() == grads.config()
        && state.m.len() == params.tensors.len()
        && state.v.len() == params.tensors.len()
        && state.m.iter().zip(params.tensors()).all(|(m, p)| m.shape() == p.shape())
        && state.v.iter().zip(params.tensors()).all(|(v, p)| v.shape() == p.shape());
    if !shapes_match {
        return Err(ModelError::ShapeMismatch("adam state, gradients and parameters disagree".into()));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        for (mv, gv) in m.iter_mut().zip(g) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
        }
        let v = state.v[i].data_mut();
        for (vv, gv) in v.iter_mut().zip(g) {
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, pv) in p.data_mut().iter_mut().enumerate() {
            *pv -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}
