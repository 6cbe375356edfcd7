use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::numel;
use crate::error::{Error, Result};

/// A learnable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Parameter {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if numel(shape) != values.len() {
            return Err(Error::invalid(
                "parameter",
                format!("{} values do not fill shape {:?}", values.len(), shape),
            ));
        }
        let n = values.len();
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        })
    }
}

/// Named parameters. Iteration is in name order so every traversal, and
/// therefore every training run, is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
    frozen: BTreeSet<String>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.params
            .insert(name.to_string(), Parameter::new(shape, values)?);
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, shape, vec![0.0; numel(shape)])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, shape, vec![1.0; numel(shape)])
    }

    /// Uniform initialization on `[-bound, bound]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let values = (0..numel(shape))
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, shape, values)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(|p| p.values.as_slice())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar values, optionally restricted to a name prefix.
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.values.len())
            .sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.contains(name) {
            return Err(Error::MissingParam(name.to_string()));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Move every parameter of `other` into this store. Frozen marks carry over.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::DuplicateParam(name));
            }
            self.params.insert(name, p);
        }
        self.frozen.extend(other.frozen);
        Ok(())
    }

    /// Copy of the parameters under `prefix`, with fresh optimizer state.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.params.insert(
                name.clone(),
                Parameter::new(&p.shape, p.values.clone()).expect("shape already validated"),
            );
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale trainable gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let f = max_norm / norm;
            for (name, p) in self.params.iter_mut() {
                if !self.frozen.contains(name) {
                    p.grad.iter_mut().for_each(|g| *g *= f);
                }
            }
        }
    }

    /// One Adam update with bias correction on every non-frozen parameter,
    /// then zero all gradients. Fails before touching any value if a
    /// gradient is not finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            for i in 0..p.values.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }
}
