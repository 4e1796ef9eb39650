//! Named trainable parameters and per-batch gradient accumulation.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimiser groups. Each group maps to one learning rate at training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Transformer encoder and its embeddings.
    Encoder,
    /// Visual projection and adapter (stands in for the image backbone).
    Visual,
    /// Relation classifier head over `[CLS]`.
    RelationHead,
    /// Word/char embedders, biLSTM and CRF.
    Tagger,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Visual => "visual",
            ParamGroup::RelationHead => "relation_head",
            ParamGroup::Tagger => "tagger",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: Real,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<Real, _>(StandardNormal) * std).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: Real,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_full(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], v: Real) -> ParamId {
        self.add(name, group, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Order-sensitive FNV-1a digest over the raw bits of every parameter in
    /// `group`. Used to prove a group was left untouched.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (name, value) in entries {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: expected shape {:?}, found {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

/// Gradients summed over the examples of a batch.
#[derive(Debug, Clone, Default)]
pub struct GradBuffer {
    grads: BTreeMap<ParamId, Vec<Real>>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(id, g.to_vec());
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[Real]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[Real])> {
        self.grads.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<Real>) {
        self.grads.insert(id, grad);
    }
}
