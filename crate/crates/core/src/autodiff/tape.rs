//! Reverse-mode tape.
//!
//! Every differentiable operation pushes one node holding its output value and
//! a vector-Jacobian product closure that owns whatever forward state it needs.
//! `backward` replays the nodes in reverse push order and accumulates
//! gradients into shared inputs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient contribution per input, `None` where an input receives nothing.
pub(crate) type InputGrads = Vec<Option<Vec<f64>>>;

/// Maps the output cotangent to input cotangents. The mask says which inputs
/// actually need a gradient so the closure can skip work.
pub(crate) type Vjp = Box<dyn Fn(&[f64], &[bool]) -> InputGrads + Send>;

struct Node {
    op: &'static str,
    value: Arc<Tensor>,
    inputs: Vec<Var>,
    requires_grad: bool,
    vjp: Option<Vjp>,
}

pub struct Tape {
    nodes: Vec<Node>,
    straight_through: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            straight_through: true,
        }
    }

    /// Whether the token-sort surrogate gradient is emitted. Turning it off
    /// leaves the index offsets with their true (zero almost everywhere)
    /// derivative, which is what finite differences see.
    pub fn straight_through(&self) -> bool {
        self.straight_through
    }

    pub fn set_straight_through(&mut self, enabled: bool) {
        self.straight_through = enabled;
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.shared(Arc::new(value))
    }

    /// Trainable leaf sharing storage with the caller (parameters).
    pub fn shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_node("leaf", value, Vec::new(), true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node("const", Arc::new(value), Vec::new(), false, None)
    }

    /// Shared-storage leaf that never receives a gradient.
    pub fn shared_constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push_node("const", value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Records an operation. Rejects non-finite outputs.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        vjp: Vjp,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let vjp = requires_grad.then_some(vjp);
        Ok(self.push_node(op, Arc::new(value), inputs, requires_grad, vjp))
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Arc<Tensor>,
        inputs: Vec<Var>,
        requires_grad: bool,
        vjp: Option<Vjp>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs,
            requires_grad,
            vjp,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backward pass from a single-element root seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let shape = self.shape(root).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::dim("backward", &shape, &[1]));
        }
        self.backward_with(root, &Tensor::full(&shape, 1.0))
    }

    /// Backward pass seeded with an explicit cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: &Tensor) -> Result<Grads> {
        seed.expect_shape("backward", self.shape(root))?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[root.0] = Some(seed.data().to_vec());

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(vjp) = node.vjp.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[idx].as_ref() else {
                continue;
            };
            let mask: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let contributions = vjp(out_grad, &mask);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "{}", node.op);
            visited.push(idx);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(g) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.numel(), "{}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: self.nodes[idx].op,
                    });
                }
            }
        }
        Ok(Grads { grads, visited })
    }
}

/// Result of a backward pass.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`, zeros where nothing flowed.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Node indices in the order their VJPs ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
