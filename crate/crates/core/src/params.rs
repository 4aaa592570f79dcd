//! Named parameter storage shared by every trainable component.

use std::collections::BTreeMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Flat, insertion-ordered set of named 2-D parameter arrays.
///
/// Every model component registers its arrays here under a dotted name
/// (`encoder.block0.attn.q.weight`), which is also the name used in
/// checkpoints. Freezing is a per-array flag consulted when gradients are
/// recorded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Panics on a duplicate name: component
    /// constructors own their namespaces, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag on every array whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self, only_trainable: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !only_trainable || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the arrays
    /// whose names start with `prefix` (empty prefix hashes everything).
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradients indexed like the store they were computed against. Frozen
/// arrays (and arrays the loss does not depend on) have no entry.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Matrix>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Element-wise accumulation; entries missing on either side are treated as zero.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
