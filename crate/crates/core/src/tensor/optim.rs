use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |id| {
            let p: &Tensor = params.get(id);
            Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("param shape")
        };
        AdamState {
            config,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry
    /// are updated as if their gradient were zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            let p = params.get(id);
            if p.shape() != g.shape() || id.index() >= self.m.len() {
                return Err(Error::shape(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    params.name(id),
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
        for id in params.ids() {
            if self.m[id.index()].shape() != params.get(id).shape() {
                return Err(Error::shape(format!("moments of {}", params.name(id))));
            }
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids() {
            let i = id.index();
            let g = grads.get(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that `‖grads‖ / batch_size` does not exceed `max_ratio`.
/// Returns the factor applied (1 when untouched).
pub fn clip_by_batch_norm(grads: &mut Gradients, batch_size: usize, max_ratio: f64) -> f64 {
    assert!(batch_size >= 1, "batch size must be positive");
    let norm = grads.global_norm();
    let limit = max_ratio * batch_size as f64;
    if norm <= limit || norm == 0.0 {
        return 1.0;
    }
    let factor = limit / norm;
    grads.scale(factor);
    factor
}
