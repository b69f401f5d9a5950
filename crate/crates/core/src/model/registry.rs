use std::collections::HashMap;

use indexmap::IndexMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, uniquely named set of model tensors.
///
/// Enumeration order is insertion order, which the model builder fixes per
/// architecture, so flat scalar offsets are stable across processes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterRegistry {
    entries: IndexMap<String, Tensor>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) -> Result<()> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(Error::Config(format!("duplicate parameter id {id}")));
        }
        self.entries.insert(id, tensor);
        Ok(())
    }

    pub(crate) fn remove(&mut self, id: &str) -> Option<Tensor> {
        self.entries.shift_remove(id)
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// N: scalar count over every entry, trainable or not.
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, id: &str, flag: bool) -> Result<()> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::Config(format!("unknown parameter {id}")))?
            .set_requires_grad(flag);
        Ok(())
    }

    /// Copies every entry onto `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(id, t)| {
                let mut leaf = t.clone();
                leaf.zero_grad();
                (id.clone(), graph.leaf(leaf))
            })
            .collect();
        BoundParams {
            vars,
            effective: HashMap::new(),
        }
    }

    /// Raw values of the trainable entries, keyed by id.
    pub fn snapshot_trainable(&self) -> IndexMap<String, Vec<f64>> {
        self.trainable()
            .map(|(id, t)| (id.to_string(), t.data().to_vec()))
            .collect()
    }

    /// Bitwise equality of every tensor's data and shape.
    pub fn bitwise_eq(&self, other: &ParameterRegistry) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((ia, ta), (ib, tb))| ia == ib && ta.bitwise_eq(tb))
    }
}

/// Registry entries placed on one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
    effective: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, id: &str) -> Result<Var> {
        self.vars
            .get(id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {id} not bound")))
    }

    /// The value a layer actually uses for `id`: the adapted weight if an
    /// adapter overrides it, the raw parameter otherwise.
    pub fn effective(&self, id: &str) -> Result<Var> {
        match self.effective.get(id) {
            Some(v) => Ok(*v),
            None => self.var(id),
        }
    }

    pub(crate) fn set_effective(&mut self, id: &str, var: Var) {
        self.effective.insert(id.to_string(), var);
    }

    /// Gradients of the trainable entries; unreachable ones come back as zeros.
    pub fn gradients(&self, graph: &Graph, registry: &ParameterRegistry) -> Gradients {
        let entries = registry
            .trainable()
            .map(|(id, t)| {
                let g = self
                    .vars
                    .get(id)
                    .and_then(|v| graph.grad(*v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (id.to_string(), g)
            })
            .collect();
        Gradients { entries }
    }
}

/// Per-parameter gradient buffers, aligned with the trainable registry entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: IndexMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        Gradients {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().flatten().all(|x| x.is_finite())
    }
}
