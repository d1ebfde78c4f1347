//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolution blocks of the visual encoder: momentum SGD, frozen during cold start.
    EncoderConv,
    /// Everything else: AdamW.
    Adaptive,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, tensor, group });
        Ok(id)
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
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    /// Replaces a tensor by name, keeping its shape contract.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if self.get(id).shape() != tensor.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.get(id).shape(),
                tensor.shape()
            )));
        }
        self.entries[id.0].tensor = tensor;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Parameters of one [`ParamStore`] bound as leaves of a [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds every parameter; those for which `frozen` holds become constants.
    pub fn new(g: &mut Graph, store: &ParamStore, frozen: impl Fn(ParamGroup) -> bool) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), !frozen(e.group)))
            .collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes `var` for parameter `id` in everything built afterwards.
    pub fn rebind(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// Uniform fan-in initialisation with standard deviation `gain / sqrt(fan_in)`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
