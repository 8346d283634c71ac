//! Named trainable parameters and their gradient accumulators.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub trainable: bool,
    /// Per-parameter learning-rate multiplier. Adam's update is invariant
    /// to uniform gradient scaling, so slowing a parameter group down has
    /// to happen through the step size, not the gradient.
    pub lr_scale: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor2, trainable: bool) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor2::zeros(r, c),
            trainable,
            lr_scale: 1.0,
        }
    }
}

/// Stable handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat registry of every parameter in a model. Layers hold `ParamId`s;
/// the optimizer, checkpointing, and the gradient checker iterate the set.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name, value, trainable));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Parameter)> {
        self.iter().find(|(_, p)| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Scale every gradient, e.g. by 1/batch for mean reduction.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.scale(s);
        }
    }

    pub fn check_grads_finite(&self) -> Result<()> {
        for p in &self.params {
            if !p.grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        Ok(())
    }
}
