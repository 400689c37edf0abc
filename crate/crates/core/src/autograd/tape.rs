use super::{Activation, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    /// `b`'s shape is a suffix of `a`'s.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: S,
    },
    Sum {
        a: Var,
    },
    SoftmaxMasked {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Act {
        a: Var,
        kind: Activation,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) grad: Option<Tensor<S>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<S>,
}

/// Records a computation so gradients can be pulled back from a scalar.
///
/// A tape is single-use: build the graph, call [`Tape::backward`] once, read
/// gradients off any node (leaves and retained intermediates alike).
pub struct Tape<S = f64> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves flagged here (and whatever depends
    /// on them) take part in backward.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &mut self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Ok(());
        }
        node.grad = Some(Tensor::full(node.value.shape(), S::one()));
        for id in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            super::ops::backward_node(node, grad, before);
        }
        Ok(())
    }
}
