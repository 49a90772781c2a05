use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors of a model: trainable weights (`requires_grad`) and
/// non-trainable buffers such as batch-norm running statistics. Iteration
/// order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// He-normal weight: std = sqrt(2 / fan_in).
    pub fn insert_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng))?;
        self.insert(name, t.with_requires_grad(true))
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<()> {
        self.insert(name, Tensor::full(shape, value).with_requires_grad(trainable))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: &str, b: &str) -> Result<(&mut Tensor, &mut Tensor)> {
        if a == b {
            return Err(Error::InvalidConfig(format!("pair_mut on the same entry {a}")));
        }
        let mut first = None;
        let mut second = None;
        for (k, v) in self.entries.iter_mut() {
            if k == a {
                first = Some(v);
            } else if k == b {
                second = Some(v);
            }
        }
        match (first, second) {
            (Some(x), Some(y)) => Ok((x, y)),
            _ => Err(Error::InvalidConfig(format!("unknown parameter {a} or {b}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar trainable weights, optionally restricted to a name prefix.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, t)| t.requires_grad() && k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn round_to_f32(&mut self) {
        self.entries.values_mut().for_each(Tensor::round_to_f32);
    }
}
