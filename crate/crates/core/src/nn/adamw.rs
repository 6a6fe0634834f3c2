use serde::{Deserialize, Serialize};

use super::param::Module;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// AdamW with decoupled weight decay (the PyTorch update order).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &dyn Module) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    pub fn update(&mut self, model: &mut dyn Module, lr: f32) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut i = 0;
        let mut mismatch = false;
        model.visit_mut(&mut |p| {
            let (Some(m), Some(v)) = (self.m.get_mut(i), self.v.get_mut(i)) else {
                mismatch = true;
                return;
            };
            if m.len() != p.len() {
                mismatch = true;
                return;
            }
            for j in 0..p.len() {
                let g = p.grad[j];
                p.value[j] *= 1.0 - lr * c.weight_decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
            i += 1;
        });
        if mismatch || i != self.m.len() {
            return Err(Error::Shape("optimizer state does not match model parameters".into()));
        }
        Ok(())
    }
}
