//! Named parameter storage and the context threaded through a forward pass.
//!
//! Parameters live outside any tape in insertion order (so serialization,
//! optimizer state, and gradient collection all agree on ordering). A
//! [`Forward`] binds each parameter onto a tape as a gradient-tracked leaf
//! the first time a layer asks for it, and collects per-parameter gradients
//! back out after `backward`.

use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::collections::HashMap;

#[derive(Clone, Debug)]
struct Entry<T> {
    tensor: Tensor<T>,
    /// Buffers (running statistics) ride along with parameters but receive
    /// no gradients and no optimizer updates.
    trainable: bool,
}

/// Ordered name -> tensor map for weights and statistics buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert_param(&mut self, name: &str, tensor: Tensor<T>) {
        let prev = self.entries.insert(name.to_string(), Entry { tensor, trainable: true });
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor<T>) {
        let prev = self.entries.insert(name.to_string(), Entry { tensor, trainable: false });
        assert!(prev.is_none(), "duplicate buffer name `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Trainable names in insertion order.
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    /// Total trainable element count.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Elementwise width conversion, preserving order and trainability.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            let t = e.tensor.cast();
            if e.trainable {
                out.insert_param(name, t);
            } else {
                out.insert_buffer(name, t);
            }
        }
        out
    }
}

/// Pending running-statistics update produced by one normalization layer
/// during a training forward pass. Applied to the store *after* the
/// optimizer step so the forward pass itself never mutates parameters.
pub struct StatsUpdate<T> {
    /// Name prefix of the layer, e.g. `enc.stem.br1.bn1`.
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements averaged per channel (for the unbiased variance correction).
    pub count: usize,
}

/// One forward pass: a tape, the parameter store, and the leaf cache that
/// ensures each parameter appears on the tape exactly once no matter how
/// many layers read it.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    bound: HashMap<String, TensorId>,
    used: Vec<String>,
    pub stats_updates: Vec<StatsUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>) -> Self {
        Forward { tape, params, bound: HashMap::new(), used: Vec::new(), stats_updates: Vec::new() }
    }

    pub fn train(&self) -> bool {
        self.tape.is_train()
    }

    /// Tape id of a named parameter, binding it as a trainable leaf on first
    /// use. Panics on unknown names: a layer asking for a parameter that
    /// `init` did not create is a model-definition bug.
    pub fn param(&mut self, name: &str) -> TensorId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let tensor = self.params.get(name).clone();
        let trainable = self.params.is_trainable(name);
        let id = self.tape.leaf(tensor, trainable);
        self.bound.insert(name.to_string(), id);
        self.used.push(name.to_string());
        id
    }

    /// Pre-bind `name` to an existing tape node so the forward pass
    /// differentiates through that node instead of the stored value. Lets
    /// finite-difference checks treat a parameter as an input. Must precede
    /// the first `param(name)` call.
    pub fn bind_override(&mut self, name: &str, id: TensorId) {
        assert!(self.params.contains(name), "cannot override unknown parameter `{name}`");
        let prev = self.bound.insert(name.to_string(), id);
        assert!(prev.is_none(), "`{name}` is already bound on this pass");
        self.used.push(name.to_string());
    }

    /// Raw data of a buffer (running statistics) without binding it;
    /// recorded as used so coverage checks see buffers too.
    pub fn buffer_data(&mut self, name: &str) -> &[T] {
        assert!(!self.params.is_trainable(name), "`{name}` is trainable; bind it with param()");
        if !self.used.iter().any(|u| u == name) {
            self.used.push(name.to_string());
        }
        self.params.get(name).data()
    }

    /// Names bound so far, in first-use order.
    pub fn used_names(&self) -> &[String] {
        &self.used
    }

    /// Per-parameter gradients for every trainable parameter, in store
    /// order. Parameters the pass never touched (e.g. branch-2 weights in a
    /// single-branch variant do not exist; but conditionally unused heads
    /// would land here) get zero gradients.
    pub fn collect_grads(&self) -> Vec<(String, Vec<T>)> {
        self.params
            .trainable_names()
            .map(|name| {
                let grad = self
                    .bound
                    .get(name)
                    .and_then(|&id| self.tape.grad(id))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.params.get(name).numel()]);
                (name.to_string(), grad)
            })
            .collect()
    }
}
