//! Adam with optional decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `true`: `p -= lr * wd * p` beside the Adam step. `false`: `wd * p` is added to the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 5e-4,
            epochs: 60,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_weight_decay: true,
        }
    }
}

impl OptimizerConfig {
    /// `epochs = 0` is accepted and means "return the initialisation".
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "optimizer.learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "optimizer.weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size must be at least 1"));
        }
        for (name, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("optimizer.eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per trainable parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient entry are treated as having zero gradient,
    /// so their moments still decay and weight decay still applies.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        config: &OptimizerConfig,
    ) -> Result<()> {
        if self.m.len() != store.num_params() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} moments for {} parameters",
                self.m.len(),
                store.num_params()
            )));
        }
        self.step += 1;
        let lr = config.learning_rate;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        let ids: Vec<ParamId> = store.param_ids().collect();
        for id in ids {
            let i = id.0;
            let grad = grads.get(&id);
            if let Some(g) = grad {
                if g.shape() != self.m[i].shape() {
                    return Err(Error::shape(format!(
                        "gradient for {} has shape {:?}, parameter {:?}",
                        store.param_name(id),
                        g.shape(),
                        self.m[i].shape()
                    )));
                }
            }
            let p = store.param_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let mut gk = grad.map_or(0.0, |g| g.data()[k]);
                if !config.decoupled_weight_decay {
                    gk += config.weight_decay * p[k];
                }
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let step = (m[k] / c1) / ((v[k] / c2).sqrt() + config.eps);
                if config.decoupled_weight_decay {
                    p[k] -= lr * config.weight_decay * p[k];
                }
                p[k] -= lr * step;
            }
        }
        Ok(())
    }
}
