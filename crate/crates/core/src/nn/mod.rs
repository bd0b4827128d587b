//! Parameter storage and the layers shared by the VAE and the denoiser.

mod blocks;
mod optim;

pub use blocks::{Attention, ResBlock, SpatialTransformer};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, Ema, LinearDecay};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Parameters placed on a graph, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(pub(crate) Vec<Var>);

impl Bound {
    /// Wraps graph variables given in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.entries.iter().map(|(_, t)| g.param(t.clone())).collect())
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.entries.iter().map(|(_, t)| g.input(t.clone())).collect())
    }

    /// Gradient per parameter, zero where the loss does not depend on it.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(bound.vars())
            .map(|((_, t), v)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces values from `(name, tensor)` pairs that must match this store exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                entries.len(),
                self.entries.len()
            )));
        }
        for ((name, t), (en, et)) in self.entries.iter().zip(&entries) {
            if name != en || t.shape() != et.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {en} {:?} does not match model parameter {name} {:?}",
                    et.shape(),
                    t.shape()
                )));
            }
        }
        self.entries = entries;
        Ok(())
    }
}

/// Largest group count ≤ 32 and ≤ c/2 that divides `c`.
pub fn norm_groups(c: usize) -> usize {
    let cap = (c / 2).clamp(1, 32);
    (1..=cap).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias; `k` must be odd for "same" padding.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[cout, cin, k, k], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[fout, fin], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fout])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            groups: norm_groups(c),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), NORM_EPS)
    }
}
