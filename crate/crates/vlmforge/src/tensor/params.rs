//! Named parameter collection.

use std::collections::BTreeMap;

use super::Tensor;

/// An ordered name -> leaf-tensor map. Iteration order is the lexicographic
/// name order (BTreeMap), which keeps optimizer sweeps, checkpoints, and any
/// derived statistics deterministic.
#[derive(Default)]
pub struct Parameters {
    map: BTreeMap<String, Tensor>,
    /// Bumped once per optimizer step; a cheap staleness marker for callers
    /// that cache derived state.
    pub version: u64,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf. Panics on duplicate names or non-leaf tensors: both
    /// indicate a model-construction bug.
    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(t.requires_grad(), "parameters: {name} must be a trainable leaf");
        let prev = self.map.insert(name.to_string(), t);
        assert!(prev.is_none(), "parameters: duplicate name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameters: unknown name {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }

    /// Deep copy: fresh leaves with the same names and values, no shared state.
    pub fn deep_clone(&self) -> Parameters {
        let mut out = Parameters::new();
        for (name, t) in &self.map {
            out.insert(name, Tensor::param(t.value(), t.shape()));
        }
        out.version = self.version;
        out
    }
}
