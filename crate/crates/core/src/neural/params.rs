use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which optimizer loss owns a parameter: `Theta` for everything trained by
/// the likelihood loss, `Zeta` for the activation policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    Theta,
    Zeta,
}

/// Named tensors, each labelled with exactly one partition.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    partition: Vec<Partition>,
    index: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, partition: Partition) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        self.partition.push(partition);
        id
    }

    /// Uniform(-scale, scale) matrix.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        partition: Partition,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data).expect("sized"), partition)
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

    pub fn ids_in(&self, part: Partition) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| self.partition[id.0] == part)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        self.partition[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces values from `(name, tensor)` pairs, checking names and shapes.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in values {
            let Some(id) = self.id(name) else { continue };
            if !self.get(id).same_shape(t) {
                return Err(Error::shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    self.get(id).shape(),
                    t.shape()
                )));
            }
            *self.get_mut(id) = t.clone();
            seen += 1;
        }
        if seen != self.len() {
            return Err(Error::format(format!("checkpoint provided {seen} of {} parameters", self.len())));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }
}

/// Per-parameter gradients; `None` for parameters the loss did not train.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn new(grads: Vec<Option<Tensor>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }
}
