use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub weight_decay_enabled: bool,
}

/// Named trainable tensors of one network, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; names are fixed by network construction.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, weight_decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            weight_decay_enabled: weight_decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape()))
            .collect()
    }

    /// Total trainable scalar count.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Places every parameter on the graph as a differentiable leaf. The
    /// returned handles are indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.leaf(p.tensor.clone())).collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but as constants (no gradient tracking).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.input(p.tensor.clone())).collect(),
        }
    }

    /// Gradients for every parameter, zero-filled where a parameter did not
    /// reach the output.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
            .collect()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    weight_decay_enabled: p.weight_decay_enabled,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// with exactly its constructed shape.
    pub fn assign(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let idx = *self
                .by_name
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            let p = &mut self.params[idx];
            if p.tensor.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: network expects {:?}, got {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps leaves created by the caller, in [`ParamId`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
