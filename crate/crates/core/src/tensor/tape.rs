use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Per-channel statistics produced by a training-mode batch norm, used by
/// callers to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Reshape(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddTiled(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<T> },
    GlobalAvgPool(Var),
    Attention { q: Var, k: Var, v: Var, groups: Vec<usize>, heads: usize, probs: Vec<T> },
    GatherRows(Var, Vec<usize>),
    IndexAdd { base: Var, src: Var, rows: Vec<usize> },
    GateRows { x: Var, gate: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanGroups(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is built fresh for every forward pass. Parameters enter it as
/// copies via [`Tape::param`]; after [`Tape::backward`] their gradients are
/// read back with [`Tape::param_grads`] (see [`ParamStore::accumulate_grads`]).
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulates gradient contributions during one reverse sweep.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Real> GradSink<'_, T> {
    /// Runs `f` on the gradient buffer of `var`, allocating it on first use.
    /// Skipped entirely when `var` does not require a gradient.
    pub fn with(&mut self, var: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[var.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(buf);
    }

    pub fn add(&mut self, var: Var, contrib: &[T]) {
        self.with(var, |g| {
            for (a, &b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        });
    }

    pub fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a parameter onto the tape as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, present once a backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of every parameter leaf reached by a backward sweep.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g)),
            _ => None,
        })
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; end];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            {
                let (nodes, _) = self.nodes.split_at(end);
                let mut sink = GradSink { grads: &mut grads, nodes };
                super::ops::backward(&nodes[i], &g, nodes, &mut sink);
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(())
    }
}
