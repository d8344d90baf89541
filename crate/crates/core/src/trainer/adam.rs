use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::model::{Grads, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one array per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    /// Number of updates applied.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState { m: params.zeros_like_params(), v: params.zeros_like_params(), t: 0 }
    }

    /// One Adam update with L2 coupled into the gradient: `g ← g + λθ`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64, l2: f64, cfg: &AdamConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = (1.0 - cfg.beta1.powf(self.t as f64)) as f32;
        let c2 = (1.0 - cfg.beta2.powf(self.t as f64)) as f32;
        let (lr, l2, eps) = (lr as f32, l2 as f32, cfg.eps as f32);
        for (((p, g), m), v) in params.params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut p.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + l2 * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}
