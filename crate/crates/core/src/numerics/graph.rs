//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation pushes a node holding its output value and a closure that
//! maps the output gradient to one gradient per parent (its vector-Jacobian
//! product). Nodes are appended in evaluation order, so walking the tape
//! backwards visits them in reverse topological order.

use super::param::{ParamGrads, ParamSet};
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Everything a backward closure may read.
pub struct BackCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Which parents actually need a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<String>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a named parameter; its gradient is reported by name.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        Ok(self.leaf(name, value))
    }

    /// A differentiable leaf with an explicit name.
    pub fn leaf(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param: Some(name.to_string()),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an operation. The output must be finite.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `root`) back to every named leaf.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<ParamGrads<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs root {:?}",
                    seed.shape(),
                    self.value(root).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = ParamGrads::new();
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(name) = &node.param {
                match out.get_mut(name) {
                    Some(acc) => Tensor::add_assign(acc, &grad)?,
                    None => {
                        out.insert(name.clone(), grad);
                    }
                }
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let ctx = BackCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient into node {p}")));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }
}
