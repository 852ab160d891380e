//! Named parameter storage shared by models, optimizer, and checkpoints.
//!
//! A `ParamSet` owns tensors in a stable insertion order. Models keep
//! `ParamId` handles; a forward pass binds the whole set onto a fresh
//! tape and addresses leaves through the returned `Binding`.

use crate::autodiff::tape::{Tape, TensorId};
use crate::autodiff::tensor::Tensor;
use std::collections::HashMap;

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    /// Register a trainable tensor under a unique name.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor.with_grad())
    }

    /// Register a frozen tensor (saved in checkpoints, never updated).
    pub fn add_frozen(&mut self, name: &str, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(false);
        self.insert(name, tensor)
    }

    fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Mark every tensor non-trainable.
    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.set_requires_grad(false);
        }
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.numel())
            .sum()
    }

    /// Insert every tensor onto the tape, preserving order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Binding { ids }
    }
}

/// Tape handles for one bound `ParamSet`.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}
