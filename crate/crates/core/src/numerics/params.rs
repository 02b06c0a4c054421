use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{invalid, Result};

/// Handle to a tensor held by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named, ordered parameter and buffer storage for one network.
///
/// Buffers (running normalization statistics) are stored alongside
/// trainable weights so checkpoints capture them, but the optimizer skips them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, false)
    }

    fn insert(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[Real], scale: Real) {
        let g = self.entries[id.0].tensor.grad_mut();
        debug_assert_eq!(g.len(), grad.len());
        for (a, b) in g.iter_mut().zip(grad) {
            *a += scale * b;
        }
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.clear_grad();
                (e.name.clone(), t)
            })
            .collect()
    }

    /// Overwrite values from named tensors; every name and shape must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(invalid(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let idx = *self
                .index
                .get(name)
                .ok_or_else(|| invalid(format!("unexpected tensor `{name}`")))?;
            let entry = &mut self.entries[idx];
            if entry.tensor.shape() != t.shape() {
                return Err(invalid(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
