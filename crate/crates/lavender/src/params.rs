//! Named parameter collections and their graph bindings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// An ordered map of named parameter tensors. Iteration order is the sorted
/// name order, which keeps optimizers and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

/// Graph handles for a bound [`ParamSet`], plus which of them are trainable
/// in the current pass.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl BoundParams {
    /// Bind every tensor as either a trainable parameter or a frozen input.
    pub fn bind(g: &mut Graph, set: &ParamSet, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        let mut train = Vec::new();
        for (name, t) in set.iter() {
            let v = if trainable { g.param(t) } else { g.input(t) };
            vars.insert(name.clone(), v);
            if trainable {
                train.push((name.clone(), v));
            }
        }
        BoundParams { vars, trainable: train }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var, trainable: bool) {
        let name = name.into();
        self.vars.insert(name.clone(), v);
        if trainable {
            self.trainable.push((name, v));
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Invalid {
            op: "BoundParams::var",
            detail: format!("no parameter named {name:?}"),
        })
    }

    /// (name, var) pairs that should receive optimizer updates.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    /// Merge another binding into this one (names must not collide).
    pub fn extend(&mut self, other: BoundParams) {
        self.vars.extend(other.vars);
        self.trainable.extend(other.trainable);
    }
}
