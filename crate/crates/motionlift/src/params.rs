//! Ordered, named parameter storage.
//!
//! A [`ParamSet`] owns every model tensor in a stable insertion order — the
//! order defines weight-initialization draws, checkpoint payload layout, and
//! optimizer state alignment, so it must never depend on hash iteration.
//! Non-trainable entries (batch-norm running statistics) live alongside the
//! trainable ones but are excluded from gradients and optimizer updates.

use std::collections::HashMap;

use crate::graph::Tensor;

/// One named tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// An insertion-ordered collection of named tensors with O(1) name lookup.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; panics on duplicate names (a model-definition bug).
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        let idx = self.entries.len();
        let prior = self.index.insert(name.clone(), idx);
        assert!(prior.is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| self.value(i))
    }

    /// Replaces a tensor's contents; the shape is part of the contract.
    pub fn set_value(&mut self, idx: usize, value: Tensor) {
        assert_eq!(
            self.entries[idx].value.shape(),
            value.shape(),
            "shape change for parameter {}",
            self.entries[idx].name
        );
        self.entries[idx].value = value;
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) {
        let idx = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.set_value(idx, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }

    /// Total count of trainable scalars.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// True when any tensor holds a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.value.iter().any(|v| !v.is_finite()))
    }
}
