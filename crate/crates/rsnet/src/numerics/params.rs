//! Named, ordered storage for trainable parameters.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle into a [`ParamStore`]. Only valid for the store that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

struct Entry {
    name: String,
    tensor: Tensor,
}

/// Insertion-ordered collection of named parameters. Registration order is
/// the canonical order for checkpoints and optimizer sweeps, so identical
/// model construction yields identical traversal on every run.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. The tensor is marked trainable and gets a
    /// zeroed gradient accumulator. Duplicate names are rejected.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(u32::try_from(self.entries.len()).expect("parameter count fits u32"));
        self.entries.push(Entry {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.idx()].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.idx()].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.idx()].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    /// Iterate in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e.name.as_str(), &e.tensor))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }
}
