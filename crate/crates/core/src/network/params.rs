//! Named parameter storage and tape binding.

use std::collections::BTreeMap;

use crate::autodiff::{GradientMap, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::RunningStats;
use crate::tensor::Tensor;

/// Which training stage may update a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Blocks 1 to 4 and both branch blocks; frozen in stage 1.
    Backbone,
    /// Reduction layers and the classifier.
    Head,
    /// Attention projection heads.
    Attention,
    /// Attention mixing coefficients.
    Gamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    /// Batch-norm running statistics by layer name.
    pub running: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, value: Tensor, group: Group) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, group });
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.position(name)?].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.position(name)?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::Contract(format!("shape of {name} would change")));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub(crate) fn values_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn running(&self, name: &str) -> Result<&RunningStats> {
        self.running.get(name).ok_or_else(|| Error::Contract(format!("no running statistics for {name}")))
    }

    /// Puts every parameter on `tape`, as a differentiable leaf when `trainable` says so.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&Param) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable(p) { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Binding { vars, index: self.index.clone() }
    }
}

/// Tape handles of a [`ParamStore`], aligned with its parameter order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points `name` at another node, e.g. a probe for a finite-difference check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        self.vars[i] = var;
        Ok(())
    }

    /// Gradients in parameter order; `None` where none reached the parameter.
    pub fn gradients(&self, grads: &mut GradientMap) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
