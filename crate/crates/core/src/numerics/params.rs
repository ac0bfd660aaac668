use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    /// Uniform Glorot initialisation for a `[fan_in, fan_out]` matrix.
    pub fn glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        if other.len() != self.len() {
            return Err(NumericsError::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("unknown parameter `{name}`")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint {:?}",
                    self.tensors[id.0].shape(),
                    t.shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}
