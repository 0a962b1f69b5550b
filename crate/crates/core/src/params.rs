//! Named parameter storage shared by every learnable module.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and similar buffers are stored but never updated by SGD.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and gradient reduction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

/// FNV-1a, used to give each parameter its own generator stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
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

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].value = value;
            self.entries[i].trainable = trainable;
            return;
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, drawn from a stream keyed by
    /// `(seed, name)` so adding or removing other parameters never shifts it.
    pub fn insert_glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name_hash(name));
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit)).expect("finite init");
        self.insert(name, value, true);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape), true);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                alloc::format!("{name}: {:?} vs {:?}", self.entries[i].value.shape(), value.shape()),
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn scalar_count(&self) -> usize {
        self.trainable().map(|e| e.value.len()).sum()
    }

    /// Places every trainable parameter on `tape`; tracked leaves when `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| e.trainable.then(|| tape.leaf(e.value.clone(), track)))
            .collect();
        Bound { vars, index: self.index.clone() }
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    /// Binding from explicit `(name, var)` pairs, for gradient checks that
    /// place parameters on a tape themselves.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { vars: vars.iter().map(|&v| Some(v)).collect(), index }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .and_then(|&i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Gradients aligned with the trainable entries of the originating store
    /// (`None` for buffers).
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

/// Gradient per store entry, aligned with [`ParamStore::entries`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Tensor> {
        store.index.get(name).and_then(|&i| self.grads[i].as_ref())
    }
}
