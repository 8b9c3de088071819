use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::rng::Rng;

/// Optimizer routing group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Both projection heads.
    Projection,
    /// Signal encoder and cross-attention.
    Signal,
    /// Text encoder (embeddings and transformer layers).
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            group,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn add_fan_in(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, group, Tensor::new(shape, data))
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
    ) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_ones(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
    ) -> ParamId {
        self.add(name, group, Tensor::full(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.entries.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names and shapes, values converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    frozen: p.frozen,
                    value: Tensor::new(
                        p.value.shape().to_vec(),
                        p.value
                            .data()
                            .iter()
                            .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                            .collect(),
                    ),
                })
                .collect(),
        }
    }
}
