use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tape::Grads;
use super::tensor::Tensor;
use super::DiffError;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Whether a parameter binding on a tape receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Train,
    Frozen,
}

/// Named parameter tensors with gradient accumulators.
///
/// Every store carries a process-unique id so that a tape mixing parameters
/// from several stores routes gradients back to the right one. Cloning a
/// store yields a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: u32,
    params: BTreeMap<String, CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Adds (or replaces) a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.grads[i] = vec![0.0; value.numel()];
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.grads.push(vec![0.0; value.numel()]);
        self.values.push(value);
        self.trainable.push(true);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn value_at(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn value_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.grads[i].as_slice())
    }

    pub fn grad_at(&self, index: usize) -> &[f64] {
        &self.grads[index]
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    /// Freezes or unfreezes every parameter.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            if name.starts_with(prefix) {
                *t = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds the gradients of this store's bindings from one backward sweep.
    /// Repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (store, index, g) in grads.param_grads() {
            if store != self.id {
                continue;
            }
            for (acc, v) in self.grads[index].iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    /// Multiplies every accumulated gradient by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flat copy of all parameter values in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Flat copy of all gradients in insertion order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }

    /// Overwrites scalar parameter `k` of the flat view.
    pub fn set_flat(&mut self, mut k: usize, value: f64) {
        for t in &mut self.values {
            if k < t.numel() {
                t.data_mut()[k] = value;
                return;
            }
            k -= t.numel();
        }
        panic!("flat parameter index out of range");
    }

    pub fn get_flat(&self, mut k: usize) -> f64 {
        for t in &self.values {
            if k < t.numel() {
                return t.data()[k];
            }
            k -= t.numel();
        }
        panic!("flat parameter index out of range");
    }

    /// Copies values of every same-named, same-shaped parameter from `other`.
    pub fn copy_from(&mut self, other: &ParamStore) {
        for (name, value) in other.names.iter().zip(&other.values) {
            if let Some(i) = self.index_of(name) {
                if self.values[i].shape() == value.shape() {
                    self.values[i] = value.clone();
                }
            }
        }
    }

    /// Serializes to the checkpoint document `{"format":1,"params":{...}}`.
    pub fn to_checkpoint_json(&self) -> Result<String, DiffError> {
        let mut params = BTreeMap::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            if value.data().iter().any(|v| !v.is_finite()) {
                return Err(DiffError::Checkpoint(format!("parameter {name} holds a non-finite value")));
            }
            params.insert(
                name.clone(),
                CheckpointEntry {
                    shape: value.shape().to_vec(),
                    data: value.data().to_vec(),
                },
            );
        }
        serde_json::to_string(&CheckpointDoc {
            format: CHECKPOINT_FORMAT,
            params,
        })
        .map_err(|e| DiffError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, DiffError> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(DiffError::Checkpoint(format!("unsupported checkpoint format {}", doc.format)));
        }
        let mut store = Self::new();
        for (name, entry) in doc.params {
            store.insert(name, Tensor::new(entry.shape, entry.data)?);
        }
        Ok(store)
    }

    /// Loads values from a checkpoint into an existing store. Every parameter
    /// of `self` must be present with a matching shape.
    pub fn load_checkpoint_json(&mut self, text: &str) -> Result<(), DiffError> {
        let loaded = Self::from_checkpoint_json(text)?;
        for (i, name) in self.names.iter().enumerate() {
            let value = loaded
                .value(name)
                .ok_or_else(|| DiffError::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            if value.shape() != self.values[i].shape() {
                return Err(DiffError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = value.clone();
        }
        Ok(())
    }
}
