//! Named parameter storage: each entry pairs a value with its gradient
//! accumulator. Non-trainable entries hold state such as normalization
//! running statistics; the optimizer skips them.

use std::collections::BTreeMap;

use rand::Rng;

use super::{DenseArray, NumericsError};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: DenseArray,
    pub grad: DenseArray,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamBundle {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        value: DenseArray,
        trainable: bool,
    ) -> Result<(), NumericsError> {
        if self.entries.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let grad = DenseArray::zeros(value.shape());
        self.entries.insert(name.to_string(), ParamEntry { value, grad, trainable });
        Ok(())
    }

    /// Convenience for model builders where duplicate names are a bug.
    pub fn register(&mut self, name: &str, value: DenseArray, trainable: bool) {
        self.insert(name, value, trainable).expect("parameter name collision");
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, NumericsError> {
        self.entries.get(name).ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry, NumericsError> {
        self.entries.get_mut(name).ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray, NumericsError> {
        Ok(&self.get(name)?.value)
    }

    pub fn accumulate(&mut self, name: &str, grad: &DenseArray) -> Result<(), NumericsError> {
        self.get_mut(name)?.grad.add_assign(grad)
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in name order; iteration order is part of the contract so
    /// checkpoints and optimizer sweeps are deterministic.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> DenseArray {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-a..a)).collect();
    DenseArray::from_vec(shape, data)
}
