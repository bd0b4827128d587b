use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::autograd::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

/// Learning rate falling linearly from `base` to zero over `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDecay {
    pub base: f64,
    pub total: u64,
}

impl LinearDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        self.base * (1.0 - step as f64 / self.total as f64).max(0.0)
    }
}

/// Exponential moving average of parameters. The effective decay ramps up as
/// `min(decay, (1 + step) / (10 + step))`.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(decay: f64, params: &ParamStore) -> Self {
        Self {
            decay,
            shadow: params.tensors().cloned().collect(),
        }
    }

    pub fn effective_decay(&self, step: u64) -> f64 {
        self.decay.min((1.0 + step as f64) / (10.0 + step as f64))
    }

    pub fn update(&mut self, params: &ParamStore, step: u64) {
        let d = self.effective_decay(step);
        for (s, p) in self.shadow.iter_mut().zip(params.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    /// A copy of `params` holding the averaged values.
    pub fn apply_to(&self, params: &ParamStore) -> ParamStore {
        let mut out = params.clone();
        for (t, s) in out.tensors_mut().zip(&self.shadow) {
            *t = s.clone();
        }
        out
    }
}
