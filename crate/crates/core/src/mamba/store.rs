//! Named parameter registry with trainable flags and a frozen pretrained
//! snapshot. Every PEFT method manipulates one of these.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

use super::{ModelError, Result};

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    trainable: BTreeMap<String, bool>,
    pretrained: BTreeMap<String, Tensor>,
    snapshot_frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor, trainable: bool) {
        self.params.insert(path.to_string(), tensor);
        self.trainable.insert(path.to_string(), trainable);
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn expect(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| ModelError::UnknownPath(path.to_string()))
    }

    /// Replaces the values at `path`; the shape must not change.
    pub fn set_data(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(path)
            .ok_or_else(|| ModelError::UnknownPath(path.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(ModelError::Config(format!(
                "shape change for `{path}`: {:?} -> {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Removes an adapter parameter. Paths carrying a pretrained snapshot are
    /// part of the base model and cannot be removed.
    pub fn remove(&mut self, path: &str) -> Result<Tensor> {
        if self.pretrained.contains_key(path) {
            return Err(ModelError::Config(format!(
                "`{path}` is a base parameter and cannot be removed"
            )));
        }
        self.trainable.remove(path);
        self.params
            .remove(path)
            .ok_or_else(|| ModelError::UnknownPath(path.to_string()))
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.get(path).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, path: &str, value: bool) -> Result<()> {
        if !self.params.contains_key(path) {
            return Err(ModelError::UnknownPath(path.to_string()));
        }
        self.trainable.insert(path.to_string(), value);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for v in self.trainable.values_mut() {
            *v = false;
        }
    }

    /// Freezes the current values as the pretrained reference. Callable once.
    pub fn snapshot_pretrained(&mut self) -> Result<()> {
        if self.snapshot_frozen {
            return Err(ModelError::SnapshotFrozen);
        }
        self.pretrained = self.params.clone();
        self.snapshot_frozen = true;
        Ok(())
    }

    pub fn has_pretrained_snapshot(&self) -> bool {
        self.snapshot_frozen
    }

    pub fn pretrained(&self, path: &str) -> Option<&Tensor> {
        self.pretrained.get(path)
    }

    pub fn pretrained_paths(&self) -> impl Iterator<Item = &String> {
        self.pretrained.keys()
    }

    /// Used by checkpoint loading to reconstruct a saved snapshot verbatim.
    pub(crate) fn restore_pretrained(&mut self, map: BTreeMap<String, Tensor>) {
        self.snapshot_frozen = !map.is_empty();
        self.pretrained = map;
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor, bool)> {
        self.params
            .iter()
            .map(|(k, v)| (k, v, self.trainable.get(k).copied().unwrap_or(false)))
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.trainable
            .iter()
            .filter(|(_, &t)| t)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total element count over trainable paths.
    pub fn count_trainable(&self) -> usize {
        self.trainable
            .iter()
            .filter(|(_, &t)| t)
            .map(|(k, _)| self.params[k].numel())
            .sum()
    }

    /// Total element count of the paths matching a predicate.
    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_frozen_store_counts_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![3, 3]), true);
        store.insert("b", Tensor::zeros(vec![3]), true);
        assert_eq!(store.count_trainable(), 12);
        store.freeze_all();
        assert_eq!(store.count_trainable(), 0);
    }

    #[test]
    fn snapshot_freezes_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(vec![2], 1.5), true);
        store.snapshot_pretrained().unwrap();
        assert!(store.snapshot_pretrained().is_err());
        store.set_data("w", Tensor::full(vec![2], 9.0)).unwrap();
        assert_eq!(store.pretrained("w").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn base_paths_cannot_be_removed() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![2]), true);
        store.snapshot_pretrained().unwrap();
        store.insert("peft.x", Tensor::zeros(vec![2]), true);
        assert!(store.remove("w").is_err());
        assert!(store.remove("peft.x").is_ok());
        assert!(store.remove("peft.x").is_err());
    }
}
