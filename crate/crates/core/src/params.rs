//! Named parameter store with deterministic (lexicographic) iteration.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Ordered map of parameter name -> tensor, plus the update-step counter.
///
/// Iteration order is the lexicographic order of names, so flattening,
/// serialization and aggregation are all deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::DuplicateName { name: name.to_string() });
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Concatenate all values in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Write `flat` back into the store's tensors, in iteration order.
    /// Round-trips [`ParamStore::flatten`] bit-exactly.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(CoreError::ShapeMismatch {
                context: "ParamStore::unflatten",
                expected: alloc::format!("{} scalars", self.scalar_count()),
                got: alloc::format!("{}", flat.len()),
            });
        }
        let mut cursor = 0;
        for t in self.entries.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[cursor..cursor + n]);
            cursor += n;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Mark every parameter whose name satisfies `pred` trainable and
    /// freeze the rest.
    pub fn set_trainable_where<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for (name, t) in self.entries.iter_mut() {
            if pred(name) {
                t.mark_trainable();
            } else {
                t.freeze();
            }
        }
    }

    pub fn mark_all_trainable(&mut self) {
        self.set_trainable_where(|_| true);
    }

    /// Clone the subset of parameters whose name satisfies `pred`.
    /// Gradient buffers are not copied.
    pub fn subset<F: Fn(&str) -> bool>(&self, pred: F) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if pred(name) {
                let mut c = t.clone();
                c.freeze();
                out.entries.insert(name.to_string(), c);
            }
        }
        out
    }

    /// Copy values (not grads) from `other` for every name both stores share.
    /// Errors if a shared name has a different shape.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, src) in other.iter() {
            if let Some(dst) = self.entries.get_mut(name) {
                if dst.shape() != src.shape() {
                    return Err(CoreError::ShapeMismatch {
                        context: "ParamStore::copy_values_from",
                        expected: dst.describe_shape(),
                        got: src.describe_shape(),
                    });
                }
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b.two", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        s.insert("a.one", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn iteration_is_lexicographic() {
        let s = store();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a.one", "b.two"]);
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut s = store();
        let e = s.insert("a.one", Tensor::zeros(&[1]));
        assert!(matches!(e, Err(CoreError::DuplicateName { .. })));
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_identity() {
        let mut s = store();
        let flat = s.flatten();
        assert_eq!(flat, vec![1.0, 3.0, 4.0]);
        s.unflatten(&flat).unwrap();
        assert_eq!(s.flatten(), flat);
    }
}
