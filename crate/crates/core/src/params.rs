//! Named, grouped trainable parameters.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Parameter groups, each with its own learning rate and freeze state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Bottom-up convolutional blocks.
    Backbone,
    /// Lateral and smoothing convolutions of the top-down pathway.
    Fpn,
    Prototypes,
    LastLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Parameters keyed by name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) {
        self.params.insert(name.into(), Param { group, value });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy of every parameter belonging to `group`.
    pub fn snapshot(&self, group: ParamGroup) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }
}

/// Graph nodes for every parameter of a [`ParamStore`], created by
/// [`ParamNodes::insert`]. Frozen groups enter the graph as constants, so
/// backward never visits them.
#[derive(Debug, Clone, Default)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn insert(g: &mut Graph, store: &ParamStore, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let nodes = store
            .iter()
            .map(|(name, p)| {
                let id = if trainable(p.group) {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (name.to_string(), id)
            })
            .collect();
        Self { nodes }
    }

    /// Wraps nodes created elsewhere, e.g. by a gradient check.
    pub fn from_nodes(nodes: BTreeMap<String, NodeId>) -> Self {
        Self { nodes }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter node named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every trainable parameter after `g.backward`.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .filter_map(|(name, &id)| {
                let grad = g.grad(id)?;
                let t = Tensor::new(g.value(id).shape().to_vec(), grad.to_vec()).ok()?;
                Some((name.clone(), t))
            })
            .collect()
    }
}
