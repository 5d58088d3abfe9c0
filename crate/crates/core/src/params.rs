//! Named storage for every trainable array, and its binding onto a tape.

use crate::array::Array;
use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{HcdError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// All trainable arrays, addressed by name. Iteration order is the sorted
/// name order, which keeps every consumer deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    arrays: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| HcdError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| HcdError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// First parameter holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.arrays
            .iter()
            .find(|(_, a)| !a.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// Mapping from parameter names to their leaf nodes on one tape.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Registers every parameter as a leaf, in sorted name order.
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, value) in store.iter() {
            ids.insert(name.clone(), tape.leaf(value.clone()));
        }
        Binding { ids }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| HcdError::Contract(format!("parameter `{name}` not bound")))
    }

    /// Gradient per parameter; parameters the loss never touched get zeros.
    pub fn collect(
        &self,
        store: &ParamStore,
        grads: &Gradients,
    ) -> Result<BTreeMap<String, Array>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.ids {
            let (rows, cols) = store.get(name)?.shape();
            out.insert(name.clone(), grads.get_or_zeros(*id, rows, cols));
        }
        Ok(out)
    }
}
