use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    reads: AtomicU64,
}

/// Named trainable tensors.
///
/// Every read through [`ParamStore::get`] is counted so callers can assert
/// which parameter groups a code path touched.
#[derive(Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.clone(),
                    reads: AtomicU64::new(0),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor: tensor.with_grad(),
            reads: AtomicU64::new(0),
        });
        ParamId(id)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        self.insert(name, Tensor::randn(shape.to_vec(), std, rng))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::full(shape.to_vec(), T::one()))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Counted read access.
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        let e = &self.entries[id.0];
        e.reads.fetch_add(1, Ordering::Relaxed);
        &e.tensor
    }

    /// Uncounted access for serialization and optimizers.
    pub fn peek(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn reads(&self, id: ParamId) -> u64 {
        self.entries[id.0].reads.load(Ordering::Relaxed)
    }

    /// Total reads over parameters whose name starts with `prefix`.
    pub fn reads_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.reads.load(Ordering::Relaxed))
            .sum()
    }

    pub fn reset_reads(&self) {
        for e in &self.entries {
            e.reads.store(0, Ordering::Relaxed);
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    pub fn add_grad(&mut self, id: ParamId, grad: &[T]) {
        let t = &mut self.entries[id.0].tensor;
        match &mut t.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => t.grad = Some(grad.to_vec()),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// All parameter values concatenated in id order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// Gradients concatenated in id order, zeros where absent.
    pub fn flatten_grad(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            match &e.tensor.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), e.tensor.numel())),
            }
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Dimension {
                op: "assign_flat",
                lhs: vec![self.num_scalars()],
                rhs: vec![values.len()],
            });
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    reads: AtomicU64::new(0),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_counted_per_prefix() {
        let mut s = ParamStore::<f64>::new();
        let a = s.zeros("enc.w", &[2]);
        let b = s.zeros("aux.w", &[2]);
        s.get(a);
        s.get(a);
        s.peek(b);
        assert_eq!(s.reads_with_prefix("enc."), 2);
        assert_eq!(s.reads_with_prefix("aux."), 0);
        s.reset_reads();
        assert_eq!(s.reads(a), 0);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut s = ParamStore::<f64>::new();
        s.zeros("a", &[2, 2]);
        s.zeros("b", &[3]);
        let v: Vec<f64> = (0..7).map(|x| x as f64).collect();
        s.assign_flat(&v).unwrap();
        assert_eq!(s.flatten(), v);
        assert!(s.assign_flat(&v[..3]).is_err());
    }
}
