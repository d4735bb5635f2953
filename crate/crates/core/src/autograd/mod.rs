//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Every op evaluates eagerly and records a closure that maps the output
//! gradient onto its inputs. Nodes that do not depend on any trainable leaf
//! carry no closure and receive no gradient.

mod conv;
mod elementwise;
mod norm;
mod sample;

pub use conv::ConvSpec;
pub use norm::BatchStats;
pub(crate) use sample::flow_position;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&[Tensor], &Tensor, &mut Grads)>;

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    backward: Vec<Option<Backward>>,
    needs_grad: Vec<bool>,
}

/// Gradient accumulator produced by [`Graph::backward`].
pub struct Grads {
    slots: Vec<Option<Tensor>>,
    needs_grad: Vec<bool>,
}

impl Grads {
    pub fn wants(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialised with `shape` on first use.
    pub fn slot(&mut self, v: Var, shape: &[usize]) -> &mut [f64] {
        self.slots[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.backward.push(None);
        self.needs_grad.push(true);
        Var(self.values.len() - 1)
    }

    /// A leaf that is held fixed.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.backward.push(None);
        self.needs_grad.push(false);
        Var(self.values.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        back: impl Fn(&[Tensor], &Tensor, &mut Grads) + 'static,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.backward.push(if needs { Some(Box::new(back)) } else { None });
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// Backpropagates from a scalar `root`. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads = Grads { slots: vec![None; root.0 + 1], needs_grad: self.needs_grad.clone() };
        grads.slots[root.0] = Some(Tensor::full(self.values[root.0].shape(), 1.0));
        for i in (0..=root.0).rev() {
            if let Some(back) = &self.backward[i] {
                if let Some(g) = grads.slots[i].take() {
                    back(&self.values, &g, &mut grads);
                }
            }
        }
        grads
    }
}
