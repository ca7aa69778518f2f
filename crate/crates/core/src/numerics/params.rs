use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to one entry of a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors, each paired with a gradient accumulator of the
/// same shape. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name:?}")))?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Fresh zeroed gradient buffers, one per entry, in store order.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| vec![0.0; e.value.len()]).collect()
    }

    /// Adds `scale * grads[i]` into every accumulator.
    pub fn accumulate(&mut self, grads: &[Vec<f64>], scale: f64) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::Dimension(format!(
                "gradient set has {} entries, store has {}",
                grads.len(),
                self.entries.len()
            )));
        }
        for (entry, g) in self.entries.iter_mut().zip(grads) {
            if g.len() != entry.grad.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {:?} has {} values, expected {}",
                    entry.name,
                    g.len(),
                    entry.grad.len()
                )));
            }
            for (acc, v) in entry.grad.data_mut().iter_mut().zip(g) {
                *acc += scale * v;
            }
        }
        for entry in &self.entries {
            entry.grad.check_finite(&format!("gradient of {}", entry.name))?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}
