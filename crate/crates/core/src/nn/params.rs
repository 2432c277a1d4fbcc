use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Result, SgnError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors. Names are unique dotted paths.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        id
    }

    /// Uniform Glorot initialization for a `fan_in x fan_out` weight.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, v))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Restores the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), ParamId(i))).collect();
    }

    /// Copies values from `other` by name; every name and shape must match.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(SgnError::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.len()
            )));
        }
        for p in &other.params {
            let id = self
                .get(&p.name)
                .ok_or_else(|| SgnError::Checkpoint(format!("unknown parameter {}", p.name)))?;
            let slot = self.value_mut(id);
            if slot.shape() != p.value.shape() {
                return Err(SgnError::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            *slot = p.value.clone();
        }
        Ok(())
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.grads.get_mut(&id) {
            Some(slot) => slot.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().for_each(|g| g.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.data.iter().all(|x| x.is_finite()))
    }
}

/// Adam with optional global-norm clipping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    first: BTreeMap<usize, Tensor>,
    second: BTreeMap<usize, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// First and second moment estimates of a parameter, if it has been
    /// updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(&id.0)?, self.second.get(&id.0)?))
    }

    pub fn set_moments(&mut self, id: ParamId, first: Tensor, second: Tensor) {
        self.first.insert(id.0, first);
        self.second.insert(id.0, second);
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step_filtered(store, grads, |_| true)
    }

    /// Updates only the parameters for which `trainable` holds.
    pub fn step_filtered(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (&id, g) in grads.iter() {
            if !trainable(store.name(id)) {
                continue;
            }
            let value = store.value_mut(id);
            let m = self.first.entry(id.0).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.second.entry(id.0).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                value.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
