use serde::{Deserialize, Serialize};

use super::{Array, Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat buffer. `step` is the 1-based
/// count after this update.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment buffers for a fixed subset of a store's parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    params: Vec<ParamId>,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m = params.iter().map(|id| Array::zeros(store.get(*id).shape())).collect::<Vec<_>>();
        AdamState {
            cfg,
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    pub fn for_all(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self::new(cfg, store, store.ids().collect())
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Updates only the parameters this state owns; disconnected ones see a
    /// zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        for (k, id) in self.params.iter().enumerate() {
            let g = grads.param_or_zero(*id);
            adam_update(
                store.get_mut(*id).data_mut(),
                g.data(),
                self.m[k].data_mut(),
                self.v[k].data_mut(),
                self.step,
                &self.cfg,
            );
        }
    }
}
