use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn new(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, usize>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.precision.round_slice(t.data_mut());
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.trainable.push(true);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Inserts a tensor drawn from N(0, std²).
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
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

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    /// Overwrites values, keeping shape and precision.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        self.precision.round_slice(t.data_mut());
        Ok(())
    }

    pub fn round_in_place(&mut self, id: ParamId) {
        let p = self.precision;
        p.round_slice(self.tensors[id.0].data_mut());
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradient buffers; absent entries mean "no gradient flowed".
#[derive(Debug, Clone, Default)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }
}
