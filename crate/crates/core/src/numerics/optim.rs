use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moment accumulators for every trainable tensor of one store.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update from the gradients held in
    /// `store`. Parameters without a gradient buffer see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(invalid(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if self.m[id.0].len() != store.get(id).numel() {
                return Err(invalid(format!(
                    "moment shape mismatch for `{}`",
                    store.name(id)
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as Real, c.beta2 as Real);
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = c.lr as Real;
        let decay = 1.0 - lr * c.weight_decay as Real;
        for id in store.trainable_ids() {
            let tensor = store.get_mut(id);
            let grad = tensor.grad().map(|g| g.to_vec());
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * decay - lr * mhat / (vhat.sqrt() + c.eps as Real);
            }
        }
        Ok(())
    }
}
