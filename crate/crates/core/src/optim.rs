//! Adam with bias correction and two learning-rate groups.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::ParamStore;

/// Parameters whose names start with this prefix use the backbone rate.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a flat parameter slice; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Moment state for every parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    lrs: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    /// Backbone parameters get `lr_backbone`, everything else `lr_head`.
    pub fn new(params: &ParamStore, lr_backbone: f64, lr_head: f64) -> Self {
        let lrs = params
            .names()
            .iter()
            .map(|n| if n.starts_with(BACKBONE_PREFIX) { lr_backbone } else { lr_head })
            .collect();
        Self::with_rates(params, lrs, AdamConfig::default())
    }

    pub fn with_rates(params: &ParamStore, lrs: Vec<f64>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            lrs,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn lr(&self, id: usize) -> f64 {
        self.lrs[id]
    }

    pub fn steps(&self, id: usize) -> u64 {
        self.steps[id]
    }

    /// Updates every parameter that has a gradient; parameters without one
    /// keep both their value and their moment state.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() || self.lrs.len() != params.len() {
            return shape_err("adam", &[params.len()], &[grads.len()]);
        }
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let theta = params.get_mut(id).data_mut();
            if g.len() != theta.len() {
                return shape_err("adam", &[theta.len()], &[g.len()]);
            }
            self.steps[id] += 1;
            adam_step(theta, g, &mut self.m[id], &mut self.v[id], self.steps[id], self.lrs[id], &self.cfg);
        }
        Ok(())
    }
}
