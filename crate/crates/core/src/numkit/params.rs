use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named, ordered collection of model tensors.
///
/// Iteration order is lexicographic by name, which fixes the order of
/// optimizer updates and checkpoint entries.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<S> {
    entries: BTreeMap<String, Tensor<S>>,
    frozen: BTreeSet<String>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.entries.insert(name.into(), t);
    }

    /// Marks a tensor as a non-trainable constant (e.g. a fixed fusion weight).
    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Registers every tensor as a graph leaf; frozen ones become constants.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, t)| {
                let v = if self.frozen.contains(k) {
                    graph.constant(t.clone())
                } else {
                    graph.param(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Collects per-parameter gradients; unreachable parameters get zeros.
    pub fn gradients<S: Scalar>(&self, graph: &Graph<S>, grads: &Gradients<S>) -> ParamSet<S> {
        let mut out = ParamSet::new();
        for (name, &v) in &self.vars {
            out.insert(name.clone(), grads.get_or_zero(graph, v));
        }
        out
    }
}

/// Weight matrix (`fan_in×fan_out`, or `K×fan_in×fan_out` for kernels)
/// drawn uniformly from `±1/sqrt(fan_in·K)`.
pub fn uniform_init<S: Scalar, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(dims.to_vec(), data).expect("dims match")
}
