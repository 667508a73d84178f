//! Persistent store for trainable parameters.
//!
//! Parameters outlive individual tapes: a forward pass binds them onto a
//! tape as leaves, and `Tape::backward` adds the resulting adjoints into the
//! gradient buffers here. Gradients accumulate across backward calls until
//! [`ParamStore::zero_grads`] — which is what gradient accumulation over
//! micro-batches relies on.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Ordered collection of named parameters with gradient buffers.
///
/// Registration order is the canonical parameter order used by checkpoint
/// serialization; names must be unique.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!(
                "parameter name registered twice: {name}"
            )));
        }
        let id = ParamId(self.entries.len());
        let grad = vec![0.0; value.numel()];
        self.entries.push(Entry {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Mutable value data alongside the gradient buffer, for in-place
    /// optimizer updates.
    pub fn value_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Multiply every gradient by `factor` (used to average accumulated
    /// micro-batch gradients).
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g *= factor;
            }
        }
    }

    /// Parameter ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Per-tape memo of parameter bindings, so each parameter is pushed onto a
/// tape at most once per forward pass even when many subjects share it.
pub struct Binding {
    nodes: Vec<Option<crate::autodiff::NodeId>>,
}

impl Binding {
    pub fn new(store: &ParamStore) -> Self {
        Binding {
            nodes: vec![None; store.len()],
        }
    }

    /// Node for `id` on `tape`, binding it on first use.
    pub fn node(
        &mut self,
        tape: &mut crate::autodiff::Tape,
        store: &ParamStore,
        id: ParamId,
    ) -> crate::autodiff::NodeId {
        *self.nodes[id.0].get_or_insert_with(|| tape.param(store, id))
    }
}
