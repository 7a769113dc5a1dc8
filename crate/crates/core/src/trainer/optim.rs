use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ParamGroup, ParameterStore};

/// Decoupled-weight-decay Adam settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip over the trainable groups.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with per-tensor step counters. Tensors outside the trainable set
/// are skipped entirely: neither their values nor their moments change.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
    pub(crate) t: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: vec![0; store.tensors().len()],
        }
    }

    /// Apply one update; returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &Gradients,
        trainable: &BTreeSet<ParamGroup>,
        lr: f64,
    ) -> f64 {
        let c = self.config;
        let active: Vec<bool> = store.tensors().iter().map(|t| trainable.contains(&t.group)).collect();
        let norm = grads
            .data
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .flat_map(|(g, _)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
            if !active[k] {
                continue;
            }
            self.t[k] += 1;
            let t = self.t[k] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let decay = if tensor.shape.len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in tensor.data.iter_mut().enumerate() {
                let g = grads.data[k][i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + decay * *p;
                *p -= lr * update;
            }
        }
        norm
    }
}

/// Linear warmup to `peak`, then cosine decay to a tenth of it.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    peak * (0.1 + 0.9 * cosine)
}

/// Default warmup: 3% of the stage, at least one step.
pub fn default_warmup(steps: usize) -> usize {
    ((steps as f64 * 0.03).ceil() as usize).max(1)
}
