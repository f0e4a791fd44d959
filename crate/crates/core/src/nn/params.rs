use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{IlsaError, Result};

/// Which module of the action-generation model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    StateEmbed,
    Transformer,
    IntermediateHead,
    FinalHead,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::StateEmbed,
        Partition::Transformer,
        Partition::IntermediateHead,
        Partition::FinalHead,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::StateEmbed => "state_embed",
            Partition::Transformer => "transformer",
            Partition::IntermediateHead => "intermediate_head",
            Partition::FinalHead => "final_head",
        }
    }

    pub fn tag(&self) -> u8 {
        *self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Partition> {
        Partition::ALL.get(tag as usize).copied()
    }

    pub fn parse(s: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type PartitionSet = BTreeSet<Partition>;

pub fn all_partitions() -> PartitionSet {
    Partition::ALL.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
}

/// Named parameter tensors, each tagged with exactly one partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(IlsaError::structural("parameter set", format!("duplicate parameter '{name}'")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, partition, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| IlsaError::structural("parameter lookup", format!("no parameter named '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.id(name)?].value)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Names of parameters whose values differ bit-wise from `other`.
    pub fn changed_names(&self, other: &ParamSet) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| match other.get(&e.name) {
                Ok(v) => !bit_equal(v, &e.value),
                Err(_) => true,
            })
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn changed_partitions(&self, other: &ParamSet) -> PartitionSet {
        self.changed_names(other)
            .iter()
            .filter_map(|n| self.id(n).ok().map(|i| self.entries[i].partition))
            .collect()
    }
}

pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.same_shape(b) && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Uniform Glorot initialisation for an `fan_in × fan_out` weight.
pub fn glorot(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape by construction")
}

/// Per-parameter gradients; `None` marks parameters that received none
/// (frozen, or not part of the recorded graph).
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn by_name<'a>(&'a self, params: &ParamSet, name: &str) -> Option<&'a Tensor> {
        params.id(name).ok().and_then(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` scaled by `w` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, w: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                            *a += w * b;
                        }
                    }
                    None => *dst = Some(src.map(|v| w * v)),
                }
            }
        }
    }

    /// First parameter carrying a non-finite gradient, if any.
    pub fn first_non_finite(&self, params: &ParamSet) -> Option<String> {
        self.grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite()))
            .map(|(i, _)| params.entry(i).name.clone())
    }
}
