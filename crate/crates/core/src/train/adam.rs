use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices and kernels only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "Adam eps must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay; moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new<T: Real>(config: &AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config: config.clone(),
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients held in `store`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.value.shape().len() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + decay * values[i].as_f64();
                values[i] -= T::lit(lr * update);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay towards 0
/// at `total`. `step` is 0-based.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}
