use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Parameters without a gradient are left as is.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Replaces every parameter that holds a gradient with its updated value.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("gradient"));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let mut next = p.to_vec();
            for i in 0..next.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                next[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            updates.push((name.clone(), Tensor::param(p.shape(), next)?));
        }
        for (name, t) in updates {
            params.set(&name, t)?;
        }
        Ok(())
    }
}
