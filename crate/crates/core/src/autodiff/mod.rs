//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application in topological order; the
//! forward value is computed eagerly and [`Tape::backward`] replays the ops
//! in exact reverse order, accumulating adjoints. Gradient accumulation order
//! is therefore fixed by tape order, which makes two backward passes over the
//! same tape bit-identical.

mod grad_check;
mod ops;

pub use grad_check::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// How a node was produced. Input references always point at earlier nodes.
#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: F },
    AddRow { mat: TensorId, row: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId },
    LogSoftmax { a: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: F },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    GatherRows { a: TensorId, idx: Vec<usize> },
    RepeatRow { a: TensorId, n: usize },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Reshape { a: TensorId },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    /// Reachable from a `requires_grad` leaf; backward skips the rest.
    needs_grad: bool,
    requires_grad: bool,
    /// Adjoint accumulator for leaves, filled by [`Tape::backward`].
    grad: Option<Vec<F>>,
}

/// Wengert list of recorded primitive applications.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        id
    }

    /// Record a constant (no gradient ever flows into it).
    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[TensorId]) -> TensorId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        id
    }

    /// Reverse sweep from a scalar `loss`. Every `requires_grad` leaf ends up
    /// holding `d loss / d leaf`, added on top of any gradient already there.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Vec<F>> = Vec::with_capacity(n);
        for node in &self.nodes {
            adj.push(vec![F::zero(); node.value.numel()]);
        }
        adj[loss.0][0] = F::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &mut adj);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                let g = &adj[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += *b;
                        }
                    }
                    None => node.grad = Some(g.clone()),
                }
            }
        }
        Ok(())
    }
}
