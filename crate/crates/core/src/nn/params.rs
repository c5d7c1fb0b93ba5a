use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics, view weights) are stored and
    /// checkpointed like parameters but never receive gradients.
    pub trainable: bool,
}

/// Named tensors owned by a model, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Overwrites every tensor from `other`, which must hold the same names and
    /// shapes in the same order.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter().zip(other) {
            if &e.name != name || e.value.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        for (e, (_, t)) in self.entries.iter_mut().zip(other) {
            e.value = t.clone();
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SeededRng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// A child scope `prefix.name`.
    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = self.rng.normal_tensor(shape, std);
        let n = self.full_name(name);
        self.store.add(n, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, value), true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, running averages updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward pass: a fresh tape plus the parameters bound onto it.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    mode: Mode,
    bound: BTreeMap<ParamId, Var>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode) -> Self {
        Self { tape: Tape::new(), store, mode, bound: BTreeMap::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// The tape variable for a parameter; a parameter used several times is
    /// bound once so its gradient accumulates.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let e = self.store.entry(id);
        let value = e.value.clone();
        let v = if e.trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound.insert(id, v);
        v
    }

    /// Gradients of bound trainable parameters, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .filter(|(id, _)| self.store.entry(**id).trainable)
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }
}
