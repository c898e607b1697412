use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Copies of the tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.add(name, t.clone());
        }
        out
    }

    /// Appends every tensor of `other`; names must stay unique.
    pub fn extend(&mut self, other: &ParamSet) -> Result<()> {
        if let Some(dup) = other.names.iter().find(|n| self.names.contains(n)) {
            return Err(Error::Checkpoint(format!("duplicate parameter {dup:?}")));
        }
        for (name, t) in other.iter() {
            self.add(name, t.clone());
        }
        Ok(())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    }
}

/// A [`ParamSet`] placed on a tape, indexed by [`ParamId`].
#[derive(Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// View of a contiguous run of parameters, re-indexed from zero. Lets a
    /// model built on its own `ParamSet` run against a merged set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Bound<'t> {
        Bound {
            vars: self.vars[range].to_vec(),
        }
    }
}

impl<'t> std::ops::Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn new(by_node: Vec<Option<Tensor>>) -> Self {
        Self { by_node }
    }

    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(var.id()).and_then(Option::as_ref)
    }

    /// One gradient per bound parameter; parameters the loss never touched
    /// get zeros.
    pub fn for_params(&self, bound: &Bound<'_>) -> Vec<Tensor> {
        bound
            .vars()
            .iter()
            .map(|v| {
                self.get(*v).cloned().unwrap_or_else(|| {
                    let [r, c] = v.shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}
