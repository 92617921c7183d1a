//! Named parameter storage, initialisation, basic layers and the AdamW
//! optimiser.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named model weights, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// The named tensor, or a shape error naming the missing weight.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds all of `other`'s entries, replacing same-named ones.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Binds a stored weight into a graph.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(name, self.require(name)?))
    }

    /// Sets every weight whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(0.0);
            }
        }
    }
}

/// Seeded weight initialiser; draws happen in declaration order.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-normal weights with the given fan-in.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    /// Fully connected layer `{prefix}.w: [in, out]`, `{prefix}.b: [out]`.
    pub fn linear(&mut self, ps: &mut ParamStore, prefix: &str, input: usize, output: usize) {
        ps.insert(format!("{prefix}.w"), self.he(&[input, output], input));
        ps.insert(format!("{prefix}.b"), Tensor::zeros(&[output]));
    }

    /// Fully connected layer with all-zero weights.
    pub fn linear_zero(&mut self, ps: &mut ParamStore, prefix: &str, input: usize, output: usize) {
        ps.insert(format!("{prefix}.w"), Tensor::zeros(&[input, output]));
        ps.insert(format!("{prefix}.b"), Tensor::zeros(&[output]));
    }

    /// Convolution `{prefix}.w: [out, in, k, k]`, `{prefix}.b: [out]`.
    pub fn conv(&mut self, ps: &mut ParamStore, prefix: &str, input: usize, output: usize, k: usize) {
        ps.insert(format!("{prefix}.w"), self.he(&[output, input, k, k], input * k * k));
        ps.insert(format!("{prefix}.b"), Tensor::zeros(&[output]));
    }

    pub fn layer_norm(&mut self, ps: &mut ParamStore, prefix: &str, dim: usize) {
        ps.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
        ps.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }
}

pub fn linear(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = ps.bind(g, &format!("{prefix}.w"))?;
    let b = ps.bind(g, &format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn conv(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = ps.bind(g, &format!("{prefix}.w"))?;
    let b = ps.bind(g, &format!("{prefix}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn layer_norm(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ps.bind(g, &format!("{prefix}.gamma"))?;
    let beta = ps.bind(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Per-position linear layer on a `[N, C, H, W]` map (1×1 convolution with
/// `[C, out]` weights, stored in the same layout as [`linear`]).
pub fn pointwise(g: &mut Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let perm = g.permute(x, &[0, 2, 3, 1])?;
    let y = linear(g, ps, prefix, perm)?;
    g.permute(y, &[0, 3, 1, 2])
}

/// Hyper-parameters of AdamW.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-3 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: ParamStore::new(), second: ParamStore::new() }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if self.first.get(name).is_none() {
                self.first.insert(name.clone(), Tensor::zeros(p.shape()));
                self.second.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.first.get_mut(name).unwrap().data_mut();
            let v = self.second.get_mut(name).unwrap().data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pv *= 1.0 - lr * c.weight_decay;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
