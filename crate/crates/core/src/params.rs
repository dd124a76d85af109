//! Named parameter storage with a frozen set.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors. Iteration order is lexicographic by name, which
/// fixes every reduction order that walks the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        if self.params.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    pub fn unfreeze(&mut self, name: &str) {
        self.frozen.remove(name);
    }

    /// Freezes every parameter whose name starts with `prefix`, except the
    /// names listed in `keep_trainable`.
    pub fn freeze_prefix(&mut self, prefix: &str, keep_trainable: &[&str]) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with(prefix) && !keep_trainable.contains(&n.as_str()))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|n| !n.starts_with(prefix));
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys().filter(|n| !self.frozen.contains(*n))
    }

    /// Total number of scalar values among parameters whose name starts with
    /// `prefix` (empty prefix counts everything).
    pub fn count_values(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies every parameter under `prefix` from `other`, overwriting.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.params.insert(name.clone(), t.clone());
            n += 1;
        }
        n
    }

    /// Returns a copy holding only the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        out.copy_prefix_from(self, prefix);
        for f in self.frozen.iter().filter(|n| n.starts_with(prefix)) {
            out.frozen.insert(f.clone());
        }
        out
    }
}

pub(crate) fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Scaled-normal init for a `[fan_in, fan_out]` weight.
pub(crate) fn linear_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    normal(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}
