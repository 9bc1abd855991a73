//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and enough of its
//! inputs to replay the adjoint. `backward` walks the nodes in exact reverse
//! order of execution. Adjoints of named parameters accumulate across calls
//! until `zero_grad` or `reset`.

use indexmap::IndexMap;
use log::warn;

use crate::error::{NnError, Result};
use crate::ops::{self, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
    pub name: Option<String>,
}

pub struct Tape<F: Scalar = f32> {
    pub(crate) nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    record_grad: bool,
    check_finite: bool,
    first_non_finite: Option<usize>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            record_grad: true,
            check_finite: false,
            first_non_finite: None,
        }
    }

    /// A tape on which parameters are treated as constants; nothing is
    /// retained for backward. Used for evaluation.
    pub fn inference() -> Self {
        Tape {
            record_grad: false,
            ..Self::new()
        }
    }

    /// Records the first operation whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and accumulated gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.first_non_finite = None;
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Var {
        let rg = self.record_grad;
        self.push_node(value, Op::Leaf, rg, Some(name.into()))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First recorded node with a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        let idx = if self.check_finite {
            self.first_non_finite
        } else {
            self.nodes.iter().position(|n| !n.value.all_finite())
        }?;
        Some((Var(idx), self.nodes[idx].op.name()))
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant(op.name()) };
        self.push_node(value, op, requires_grad, None)
    }

    fn push_node(
        &mut self,
        value: Tensor<F>,
        op: Op<F>,
        requires_grad: bool,
        name: Option<String>,
    ) -> Var {
        let idx = self.nodes.len();
        if self.check_finite && self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        self.grads.push(None);
        Var(idx)
    }

    /// Propagates adjoints from a scalar `loss` to every trainable leaf.
    ///
    /// Leaf gradients accumulate across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(NnError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            warn!("backward: loss does not depend on any trainable parameter");
            return Ok(());
        }
        let count = loss.0 + 1;
        let mut adj: Vec<Option<Vec<F>>> = (0..count).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::one()]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..count).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match &mut grads[i] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            slot => *slot = Some(g),
                        }
                    }
                }
                op => ops::backward(op, node, nodes, &g, &mut adj[..i]),
            }
        }
        Ok(())
    }

    /// Accumulated adjoint of `v`, if it is a trainable leaf reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[v.0].value.shape().to_vec(),
            g.clone(),
        ))
    }

    /// Gradients of every named parameter, in registration order.
    ///
    /// Parameters not reached by any backward pass get a zero gradient and a warning.
    pub fn gradients(&self) -> IndexMap<String, Tensor<F>> {
        let mut out = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.name else { continue };
            let grad = match &self.grads[i] {
                Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
                None => {
                    if self.record_grad {
                        warn!("parameter {name} is detached from the loss; gradient is zero");
                    }
                    Tensor::zeros(node.value.shape())
                }
            };
            out.insert(name.clone(), grad);
        }
        out
    }
}
