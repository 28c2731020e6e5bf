//! Named parameter storage shared by every network component.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of trainable leaves, addressed by dotted names such as
/// `backbone.stage2.conv1.weight`.
#[derive(Clone, Debug)]
pub struct ParamStore<E: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, ParamId>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Shape, data: Vec<E>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(Tensor::parameter(shape, data)?);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// He-uniform weight: `U(−√(6/fan_in), √(6/fan_in))` with `fan_in = c·k·k`.
    pub fn insert_he_uniform(&mut self, name: impl Into<String>, shape: Shape, rng: &mut impl Rng) -> Result<ParamId> {
        let fan_in = shape.c() * shape.plane();
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| E::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, shape, data)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Shape) -> Result<ParamId> {
        self.insert(name, shape, vec![E::zero(); shape.numel()])
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replaces a parameter's values with a fresh tracked leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<E>) -> Result<()> {
        let shape = self.tensors[id.0].shape();
        self.tensors[id.0] = Tensor::parameter(shape, data)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.shape().numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }

    /// Same names and values in another precision, as fresh tracked leaves.
    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            let c = t.cast::<F>();
            out.insert(name, c.shape(), c.into_data()).expect("names are unique");
        }
        out
    }
}
