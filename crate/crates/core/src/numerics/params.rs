use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Half-width of the uniform initializer for embedding tables.
pub const EMBED_INIT_RANGE: f64 = 0.08;

/// Named parameter tensors kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.id(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.entries[id].1
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies every parameter onto `tape`. Parameters for which `trainable`
    /// returns true are tracked for gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.set_requires_grad(trainable(name));
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], by parameter id.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles supplied by the caller, one per parameter id.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Gradients of all tracked parameters, by parameter id.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| grads.get(*v).map(<[f64]>::to_vec))
            .collect()
    }
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], range: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-range, range).expect("valid range");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Normal with standard deviation `1/sqrt(fan_in)`, where `fan_in` is the
/// first dimension of a projection matrix.
pub fn scaled_normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in = shape.first().copied().unwrap_or(1).max(1);
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
