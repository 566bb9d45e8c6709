//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, scope: &str) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("{scope}.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(format!("{scope}.beta1/beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("{scope}.epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("{scope}.weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(format!("{scope}.batch_size must be at least 1"));
        }
        Ok(())
    }
}

pub struct AdamW {
    config: OptimConfig,
    step: i32,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(config: OptimConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    /// Applies one update. Frozen parameters and parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) {
        self.step += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step);
        let bias2 = 1.0 - c.beta2.powi(self.step);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else {
                continue;
            };
            let m = self.first[id.index()].get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self.second[id.index()].get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let m = self.first[id.index()].as_ref().unwrap();
            let v = self.second[id.index()].as_ref().unwrap();
            let value = store.value_mut(id);
            ndarray::Zip::from(value).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bias1) / ((v / bias2).sqrt() + c.epsilon);
                *p -= c.learning_rate * (update + c.weight_decay * *p);
            });
        }
    }
}
