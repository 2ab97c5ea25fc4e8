use std::collections::BTreeMap;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter collection. Iteration order is the lexicographic name order,
/// which keeps every reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters placed on a [`Graph`] for one forward/backward pass.
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Place every tensor on `graph`. Names for which `trainable` returns false
    /// become constants and never receive gradients.
    pub fn bind_with(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, graph: &mut Graph) -> Bound {
        self.bind_with(graph, |_| true)
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for Params {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

impl Bound {
    /// Variable for a parameter name. Panics on unknown names, which are
    /// programming errors in model code.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collect gradients by parameter name. Parameters that did not influence
    /// the loss (or were bound as constants) are omitted.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
