use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{CheckpointEntry, Tape, Tensor, Var};
use crate::{Error, Result};

/// Running-statistic momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
///
/// Non-trainable entries (batch-norm running statistics) live alongside the
/// weights so a checkpoint captures the full model state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let mut tensor = tensor;
        tensor.round_to_f32();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    /// Adds a weight drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Trainable scalar count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id) && self.name(id).starts_with(prefix))
            .map(|id| self.get(id).len())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.round_to_f32();
        }
    }

    pub fn to_checkpoint(&self) -> Vec<CheckpointEntry> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, tensor)| CheckpointEntry {
                name: name.clone(),
                tensor: tensor.clone(),
            })
            .collect()
    }

    /// Replaces every tensor from checkpoint entries with identical names
    /// and shapes, in any order.
    pub fn load_checkpoint(&mut self, entries: Vec<CheckpointEntry>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Precondition(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        let mut staged = self.tensors.clone();
        for e in entries {
            let id = self.find(&e.name).ok_or_else(|| {
                Error::Precondition(format!("checkpoint tensor {} unknown to model", e.name))
            })?;
            if e.tensor.shape() != self.get(id).shape() {
                return Err(Error::Precondition(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    e.name,
                    e.tensor.shape(),
                    self.get(id).shape()
                )));
            }
            staged[id.0] = e.tensor;
        }
        self.tensors = staged;
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let t = self.get_mut(id);
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                t.round_to_f32();
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics and reports them.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    grads: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// `grads` decides whether parameters are recorded as differentiable leaves.
    pub fn new(store: &'a ParamStore, mode: Mode, grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.grads && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
