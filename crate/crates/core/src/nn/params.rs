use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::Gradients;
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId, NnError> {
        self.id(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copy of the values without gradient buffers.
    pub fn snapshot(&self) -> ParamStore {
        let mut out = self.clone();
        out.zero_grads();
        out
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Add analytic gradients into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), NnError> {
        for (id, g) in grads.iter() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Overwrite values of `name` keeping its shape.
    pub fn assign(&mut self, name: &str, source: &Tensor) -> Result<(), NnError> {
        let id = self.require(name)?;
        let t = &mut self.tensors[id.0];
        if t.shape() != source.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                t.shape(),
                source.shape()
            )));
        }
        t.values_mut().copy_from_slice(source.values());
        Ok(())
    }
}

/// Truncated normal (|x| <= 2 sigma) initialisation.
pub fn truncated_normal(shape: Vec<usize>, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * sigma {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, values).expect("consistent shape")
}

pub const INIT_SIGMA: f64 = 0.02;
