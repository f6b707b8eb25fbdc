use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Owns every learnable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value: Arc::new(value),
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Copy-on-write access to a parameter value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        value.expect_shape("set_value", self.params[id.0].value.shape())?;
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Registers every parameter on `tape` as a shared leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.shared(Arc::clone(&p.value)))
                .collect(),
        }
    }

    /// Registers every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.shared_constant(Arc::clone(&p.value)))
                .collect(),
        }
    }

    /// Adds `grads` for every bound parameter into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Grads) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Flattened gradient of every parameter, in registration order.
    pub fn flat_grads(bound: &Bound, grads: &Grads, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (p, &v) in store.params.iter().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.value.numel())),
            }
        }
        out
    }

    /// Adds a flat gradient (as produced by [`ParamStore::flat_grads`]) into the accumulators.
    pub fn accumulate_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.grad.numel();
            p.grad
                .data_mut()
                .iter_mut()
                .zip(&flat[offset..offset + n])
                .for_each(|(a, b)| *a += b);
            offset += n;
        }
    }
}

/// Tape handles of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Points `id` at another tape variable.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
