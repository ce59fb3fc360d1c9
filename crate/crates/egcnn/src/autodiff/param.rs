use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with its gradient and AdaGrad accumulator.
///
/// `frozen_rows` indexes the first axis; frozen rows keep their initial
/// values (the optimizer skips them) but gradients are still computed for
/// them, so finite-difference checks see the true derivative everywhere.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub accum: Tensor,
    pub frozen_rows: Vec<usize>,
}

impl Parameter {
    fn new(name: String, value: Tensor, frozen_rows: Vec<usize>) -> Parameter {
        let shape = value.shape().to_vec();
        Parameter {
            name,
            grad: Tensor::zeros(&shape),
            accum: Tensor::zeros(&shape),
            value,
            frozen_rows,
        }
    }
}

/// Owns every parameter of a model. Registration order is part of the
/// artifact contract: initialization and checkpoint layout follow it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add_with_frozen_rows(name, value, Vec::new())
    }

    pub fn add_with_frozen_rows(
        &mut self,
        name: &str,
        value: Tensor,
        frozen_rows: Vec<usize>,
    ) -> ParamId {
        let id = ParamId(self.params.len());
        self.params
            .push(Parameter::new(name.to_string(), value, frozen_rows));
        id
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .find(|(_, p)| p.name == name)
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, adjoint: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if adjoint.len() != p.grad.len() {
            return Err(Error::Shape(format!(
                "adjoint length {} does not match parameter {} of {} elements",
                adjoint.len(),
                p.name,
                p.grad.len()
            )));
        }
        for (g, a) in p.grad.data_mut().iter_mut().zip(adjoint) {
            *g += a;
        }
        Ok(())
    }
}
