//! Named parameter storage with gradient and optimizer slots.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Index of a parameter inside a [`ParamStore`]. Stable until the next
/// insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl ParamEntry {
    fn new(name: String, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self { name, grad: Tensor::zeros(&shape), m: Tensor::zeros(&shape), v: Tensor::zeros(&shape), value }
    }
}

/// Parameters kept sorted by name, so iteration order is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step_count = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step_count += 1;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        match self.entries.binary_search_by(|e| e.name.as_str().cmp(name)) {
            Ok(_) => Err(Error::Config(format!("duplicate parameter name `{name}`"))),
            Err(pos) => {
                self.entries.insert(pos, ParamEntry::new(name.to_string(), value));
                Ok(ParamId(pos))
            }
        }
    }

    /// Inserts an entry with existing optimizer state (checkpoint loading).
    pub fn insert_entry(&mut self, entry: ParamEntry) -> Result<()> {
        let shape = entry.value.shape();
        if entry.grad.shape() != shape || entry.m.shape() != shape || entry.v.shape() != shape {
            return Err(Error::Shape(format!("slot shapes differ for `{}`", entry.name)));
        }
        match self.entries.binary_search_by(|e| e.name.as_str().cmp(&entry.name)) {
            Ok(_) => Err(Error::Config(format!("duplicate parameter name `{}`", entry.name))),
            Err(pos) => {
                self.entries.insert(pos, entry);
                Ok(())
            }
        }
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .map(ParamId)
            .map_err(|_| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.id(name).is_ok()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?.0].value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id.0].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?.0].grad)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        if grads.slots.len() != self.entries.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient set has {} slots, store has {}",
                grads.slots.len(),
                self.entries.len()
            )));
        }
        for (e, g) in self.entries.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                e.grad.scale_add_assign(g, scale);
            }
        }
        Ok(())
    }

    /// Drops every parameter whose name starts with one of `prefixes`.
    pub fn remove_prefixed(&mut self, prefixes: &[&str]) {
        self.entries.retain(|e| !prefixes.iter().any(|p| e.name.starts_with(p)));
    }

    /// Copies values of all parameters that also exist in `source`. Returns
    /// the names that were present here but absent there.
    pub fn copy_matching_from(&mut self, source: &ParamStore, names: &[String]) -> Vec<String> {
        let mut missing = Vec::new();
        for name in names {
            match (self.id(name), source.value(name)) {
                (Ok(id), Ok(v)) if v.shape() == self.entries[id.0].value.shape() => {
                    self.entries[id.0].value = v.clone();
                }
                _ => missing.push(name.clone()),
            }
        }
        missing
    }

    /// Map from name to index, for callers that resolve many names.
    pub fn index(&self) -> BTreeMap<&str, ParamId> {
        self.entries.iter().enumerate().map(|(i, e)| (e.name.as_str(), ParamId(i))).collect()
    }
}

/// Gradient buffers aligned with the entries of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self { slots: alloc::vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

/// Parameter initialisers used by the model builders.
pub mod init {
    use super::*;

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
        let bound = libm::sqrt(1.0 / fan_in.max(1) as f64);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform_range(-bound, bound);
        }
        t
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = std * rng.normal();
        }
        t
    }
}
