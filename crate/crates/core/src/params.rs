//! Named parameter sets, their gradient views, and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// An ordered collection of named tensors (η, φ, θ, ...).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        Arc::make_mut(self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().map(|(k, t)| (k, t.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, t)| (k, Arc::make_mut(t)))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Arc::new(Tensor::zeros(t.rows(), t.cols())))).collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(|t| t.sq_norm()).sum()
    }

    pub fn add_scaled(&mut self, other: &ParamSet, s: f64) {
        for (k, t) in self.tensors.iter_mut() {
            let t = Arc::make_mut(t);
            if let Some(o) = other.tensors.get(k) {
                for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a += s * b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            Arc::make_mut(t).scale_assign(s);
        }
    }

    /// Flat view of every scalar in name order (finite-difference checks).
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, k: usize, v: f64) {
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let t = Arc::make_mut(t);
            if k < offset + t.len() {
                t.data_mut()[k - offset] = v;
                return;
            }
            offset += t.len();
        }
        panic!("flat index {k} out of range");
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.param_shared(Arc::clone(t)))).collect() }
    }

    /// Registers every tensor as a constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.constant_shared(Arc::clone(t)))).collect() }
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("parameter sets always serialize");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Collects gradients into a [`ParamSet`] shaped like `like`; parameters
    /// the loss did not touch get zeros.
    pub fn gradients(&self, grads: &Gradients, like: &ParamSet) -> ParamSet {
        let mut out = like.zeros_like();
        for (name, t) in out.iter_mut() {
            if let Some(g) = self.vars.get(name).and_then(|v| grads.get(*v)) {
                *t = g.clone();
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &ParamSet) -> Self {
        Self { config, step: 0, m: like.zeros_like(), v: like.zeros_like() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> f64 {
        let norm = grads.sq_norm().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.tensors.get(name) else { continue };
            let m = Arc::make_mut(self.m.tensors.get_mut(name).expect("optimizer state matches params"));
            let v = Arc::make_mut(self.v.tensors.get_mut(name).expect("optimizer state matches params"));
            for k in 0..p.len() {
                let gk = g.data()[k] * clip;
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p.data_mut()[k] -= lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Relative L2 error between the analytic gradient of `loss` and central
/// differences with step 1e-5 over every entry of `params`.
pub fn finite_difference_check(params: &ParamSet, loss: impl Fn(&ParamSet, &mut Graph, &Bound) -> Var) -> f64 {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l = loss(params, &mut g, &b);
    let analytic = b.gradients(&g.backward(l), params).flatten();
    let base = params.flatten();
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let l = loss(p, &mut g, &b);
        g.scalar(l)
    };
    let h = 1e-5;
    let mut num = Vec::with_capacity(base.len());
    let mut work = params.clone();
    for k in 0..base.len() {
        work.set_flat(k, base[k] + h);
        let up = eval(&work);
        work.set_flat(k, base[k] - h);
        let down = eval(&work);
        work.set_flat(k, base[k]);
        num.push((up - down) / (2.0 * h));
    }
    let diff = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() }, &p);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let x = b.var("x");
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = b.gradients(&g.backward(loss), &p);
            opt.step(&mut p, &grads);
        }
        assert!(p.get("x").sq_norm() < 1e-3);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let zeros = p.zeros_like();
        opt.step(&mut p, &zeros);
        assert_eq!(p, before);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0));
        let f1 = p.fingerprint();
        p.get_mut("a").data_mut()[0] = 2.0;
        assert_ne!(f1, p.fingerprint());
    }
}
