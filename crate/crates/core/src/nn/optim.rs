use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one slot per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: usize) -> Option<&Tensor> {
        self.m.get(id).and_then(|m| m.as_ref())
    }

    /// One bias-corrected update. Parameters without a gradient entry are left
    /// untouched, as are their moments.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for id in 0..params.len() {
            let Some(g) = grads.get(id) else { continue };
            let p = params.value_mut(id);
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
