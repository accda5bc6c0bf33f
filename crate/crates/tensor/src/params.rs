use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::TensorError;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Networks hold [`ParamId`]s into a store, so two
/// networks naming the same id share one storage.
#[derive(Debug)]
pub struct ParamStore<T: Real = f32> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
    frozen: bool,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    /// Value copy with a fresh identity.
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.frozen {
            return Err(TensorError::Frozen);
        }
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>, TensorError> {
        if self.frozen {
            return Err(TensorError::Frozen);
        }
        Ok(&mut self.tensors[id.0])
    }

    /// Replace a parameter value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let slot = self.get_mut(id)?;
        if slot.shape() != value.shape() {
            return Err(TensorError::Shape { expected: slot.shape().to_vec(), actual: value.shape().to_vec() });
        }
        *slot = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Make the store read-only. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over names, shapes and little-endian values, in insertion order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
