//! Named parameter storage and the SGD optimizer.

use super::Tensor;
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter inside a [`ParamStore`]. Ids remember the store
/// they were created in, so gradients recorded on a tape can never be
/// accumulated into the wrong store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

struct ParamSlot {
    name: String,
    tensor: Tensor,
    /// Weight decay applies to conv/linear weights and classifier directions,
    /// never to biases or PReLU slopes.
    decay: bool,
}

/// Flat collection of named trainable tensors.
pub struct ParamStore {
    store_id: u64,
    slots: Vec<ParamSlot>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("store_id", &self.store_id)
            .field("params", &self.slots.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { store_id: STORE_COUNTER.fetch_add(1, Ordering::Relaxed), slots: Vec::new() }
    }

    pub fn store_id(&self) -> u64 {
        self.store_id
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, decay: bool) -> ParamId {
        tensor.set_requires_grad(true);
        let id = ParamId { store: self.store_id, index: self.slots.len() };
        self.slots.push(ParamSlot { name: name.into(), tensor, decay });
        id
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// True when the id was created by this store.
    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.store_id
    }

    fn slot(&self, id: ParamId) -> &ParamSlot {
        assert!(self.owns(id), "parameter id from a different store");
        &self.slots[id.index]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slot(id).tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert!(self.owns(id), "parameter id from a different store");
        &mut self.slots[id.index].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slot(id).name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(|index| ParamId { store: self.store_id, index })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .map(|index| ParamId { store: self.store_id, index })
    }

    pub fn clear_grads(&mut self) {
        for s in &mut self.slots {
            s.tensor.clear_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.tensor.len()).sum()
    }

    /// Named views over all tensors, in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.slots.iter().map(|s| (s.name.as_str(), &s.tensor))
    }

    /// Overwrite values from `(name, data)` pairs; every parameter must be
    /// covered and shapes must match.
    pub fn load_named(&mut self, values: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for s in &mut self.slots {
            let found = values
                .iter()
                .find(|(n, _, _)| n == &s.name)
                .ok_or_else(|| Error::data(format!("checkpoint missing tensor '{}'", s.name)))?;
            if found.1 != s.tensor.shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                    s.name,
                    found.1,
                    s.tensor.shape()
                )));
            }
            s.tensor.data_mut().copy_from_slice(&found.2);
        }
        Ok(())
    }
}

/// SGD with momentum and decoupled per-parameter weight-decay flags.
///
/// Update rule: `v <- momentum*v + grad + weight_decay*param`,
/// then `param <- param - lr*v`. Gradients are cleared afterwards.
pub struct OptimState {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {momentum}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(OptimState { lr, momentum, weight_decay, buffers: Vec::new() })
    }

    /// Apply one SGD step over every parameter in the store.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = store
                .slots
                .iter()
                .map(|s| vec![0.0f32; s.tensor.len()])
                .collect();
        }
        if self.buffers.len() != store.slots.len() {
            return Err(Error::config("optimizer state does not match parameter store"));
        }
        for (slot, buf) in store.slots.iter_mut().zip(self.buffers.iter_mut()) {
            let grad = slot
                .tensor
                .grad()
                .ok_or_else(|| Error::numeric(format!("missing gradient for '{}'", slot.name)))?
                .to_vec();
            let wd = if slot.decay { self.weight_decay } else { 0.0 };
            let data = slot.tensor.data_mut();
            for i in 0..data.len() {
                let v = self.momentum * buf[i] + grad[i] + wd * data[i];
                buf[i] = v;
                data[i] -= self.lr * v;
            }
        }
        store.clear_grads();
        Ok(())
    }
}

/// Step learning-rate schedule: `base_lr * factor^floor(epoch / drop_every)`.
pub fn lr_at_epoch(epoch: usize, base_lr: f32, drop_every: usize, factor: f32) -> f32 {
    let drops = if drop_every == 0 { 0 } else { (epoch / drop_every) as i32 };
    base_lr * factor.powi(drops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step_matches_hand_calc() {
        // momentum=0, wd=0, lr=0.1, param=1, grad=1 -> param=0.9
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        store.get_mut(id).accumulate_grad(&[1.0]);
        let mut opt = OptimState::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut store).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-7);
        assert!(store.get(id).grad().is_none(), "grads cleared after step");
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.5), true);
        store.get_mut(id).accumulate_grad(&[0.0]);
        let mut opt = OptimState::new(0.5, 0.9, 0.0).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], 3.5);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0), true);
        let mut opt = OptimState::new(0.1, 0.0, 0.0).unwrap();
        assert!(opt.step(&mut store).is_err());
    }

    #[test]
    fn momentum_zero_equals_vanilla_descent() {
        let mut a = ParamStore::new();
        let ia = a.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), false);
        let mut b = ParamStore::new();
        let ib = b.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), false);
        for step in 0..5 {
            let g = [0.3 + step as f32, -0.7];
            a.get_mut(ia).accumulate_grad(&g);
            b.get_mut(ib).accumulate_grad(&g);
            let mut opt = OptimState::new(0.05, 0.0, 0.0).unwrap();
            opt.step(&mut a).unwrap();
            // Manual vanilla descent on b.
            let data = b.get_mut(ib).data_mut();
            data[0] -= 0.05 * g[0];
            data[1] -= 0.05 * g[1];
            b.clear_grads();
            assert_eq!(a.get(ia).data(), b.get(ib).data());
        }
    }

    #[test]
    fn decay_flag_selects_tensors() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0), true);
        let s = store.add("slope", Tensor::scalar(1.0), false);
        store.get_mut(w).accumulate_grad(&[0.0]);
        store.get_mut(s).accumulate_grad(&[0.0]);
        let mut opt = OptimState::new(1.0, 0.0, 0.1).unwrap();
        opt.step(&mut store).unwrap();
        assert!((store.get(w).data()[0] - 0.9).abs() < 1e-7, "decayed");
        assert_eq!(store.get(s).data()[0], 1.0, "slope not decayed");
    }

    #[test]
    fn lr_schedule_matches_drop_table() {
        assert_eq!(lr_at_epoch(0, 0.01, 20, 0.1), 0.01);
        assert!((lr_at_epoch(20, 0.01, 20, 0.1) - 0.001).abs() < 1e-9);
        assert_eq!(lr_at_epoch(19, 0.01, 20, 0.1), 0.01);
        assert!((lr_at_epoch(40, 0.01, 20, 0.1) - 0.0001).abs() < 1e-10);
    }
}
