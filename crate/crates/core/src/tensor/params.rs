//! Ordered, named parameter lists shared by every network.

use super::{NamedTensors, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Name, shape and fan-in of one trainable tensor; `fan_in == 0` marks a
/// bias (zero-initialised).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), fan_in }
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        ParamSpec { name: name.into(), shape: vec![len], fan_in: 0 }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(specs: Vec<ParamSpec>) -> Self {
        let values = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        ParamSet { specs, values }
    }

    pub fn from_values(specs: Vec<ParamSpec>, values: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::shape(format!("{} specs for {} tensors", specs.len(), values.len())));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(Error::shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, v.shape())));
            }
        }
        Ok(ParamSet { specs, values })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(move |i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { specs: self.specs.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Records every tensor as a trainable leaf, in spec order.
    pub fn attach(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Records every tensor as a constant, for inference.
    pub fn attach_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    pub fn to_named(&self) -> NamedTensors {
        self.specs.iter().zip(&self.values).map(|(s, v)| (s.name.clone(), v.cast())).collect()
    }

    /// Picks the tensors named by `specs` out of a checkpoint; extra
    /// entries are ignored.
    pub fn from_named(specs: Vec<ParamSpec>, named: &NamedTensors) -> Result<Self> {
        let values = specs
            .iter()
            .map(|s| {
                named
                    .get(&s.name)
                    .map(Tensor::cast)
                    .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(specs, values)
    }
}
