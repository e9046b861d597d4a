//! Named parameter storage.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One named parameter tensor. Trainable entries carry a gradient slot and
/// Adam moment slots of the same shape; non-trainable entries (batch-norm
/// running statistics) carry only the value.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Option<Tensor<T>>,
    pub adam_v: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T> Param<T> {
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }
}

/// Ordered map name → parameter. Iteration order is insertion order, which
/// fixes initialization, update, and serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    order: Vec<String>,
    index: std::collections::HashMap<String, usize>,
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            order: Vec::new(),
            index: std::collections::HashMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::op("params", format!("duplicate parameter name {name:?}")));
        }
        let param = Param {
            grad: trainable.then(|| Tensor::zeros(value.shape().to_vec())),
            adam_m: trainable.then(|| Tensor::zeros(value.shape().to_vec())),
            adam_v: trainable.then(|| Tensor::zeros(value.shape().to_vec())),
            value,
            trainable,
        };
        self.index.insert(name.to_string(), self.entries.len());
        self.order.push(name.to_string());
        self.entries.push(param);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.entries[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.entries[i]
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.get(name).value
    }

    /// Swap in a new value tensor (possibly of a new shape), preserving
    /// order and trainability; gradient and moment slots are re-allocated.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::op("params", format!("unknown parameter {name:?}")))?;
        let trainable = self.entries[i].trainable;
        self.entries[i] = Param {
            grad: trainable.then(|| Tensor::zeros(value.shape().to_vec())),
            adam_m: trainable.then(|| Tensor::zeros(value.shape().to_vec())),
            adam_v: trainable.then(|| Tensor::zeros(value.shape().to_vec())),
            value,
            trainable,
        };
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.order
            .iter()
            .map(|s| s.as_str())
            .zip(self.entries.iter())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total stored scalars across all entries (kernels, biases, batch-norm
    /// scale/shift and running statistics). Matches the convention the
    /// bundled models' reference sizes were reported in.
    pub fn count_scalars(&self) -> u64 {
        self.entries.iter().map(|p| p.value.len() as u64).sum()
    }

    /// Accumulate `delta` into a trainable parameter's gradient slot.
    pub fn add_grad(&mut self, name: &str, delta: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name);
        match p.grad.as_mut() {
            Some(g) => g.add_assign(delta),
            None => Err(Error::op("params", format!("{name:?} is not trainable"))),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            if let Some(g) = p.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    /// In-order mutable visit of every trainable entry.
    pub fn for_each_trainable(&mut self, mut f: impl FnMut(&str, &mut Param<T>)) {
        for (name, entry) in self.order.iter().zip(self.entries.iter_mut()) {
            if entry.trainable {
                f(name, entry);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::zeros(vec![2]), true).unwrap();
        assert!(ps.insert("w", Tensor::zeros(vec![2]), true).is_err());
    }

    #[test]
    fn trainable_entries_have_slots() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::zeros(vec![3]), true).unwrap();
        ps.insert("stat", Tensor::zeros(vec![3]), false).unwrap();
        assert!(ps.get("w").grad.is_some());
        assert!(ps.get("w").adam_m.is_some());
        assert!(ps.get("stat").grad.is_none());
        assert_eq!(ps.count_scalars(), 6);
    }

    #[test]
    fn order_is_insertion_order() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("b", Tensor::zeros(vec![1]), true).unwrap();
        ps.insert("a", Tensor::zeros(vec![1]), true).unwrap();
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["b", "a"]);
    }
}
