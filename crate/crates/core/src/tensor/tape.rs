use std::cell::RefCell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded op.
///
/// Receives the gradient of the op output and a mask saying which inputs need
/// a gradient; returns one entry per input (`None` where not needed).
pub type BackwardFn<S> = Box<dyn FnOnce(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<S>>,
    shape: Vec<usize>,
}

/// Records differentiable operations in creation order.
///
/// Nodes are appended after their parents, so the node list is already a
/// topological order and backward simply walks it in reverse. A tape is
/// single-threaded; use one tape per worker.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor value, optionally tracked by a tape.
#[derive(Clone)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    value: Tensor<S>,
    node: Option<usize>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self,
            value,
            node: Some(id),
        }
    }

    /// An untracked value; ops on constants only do not record anything.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        Var {
            tape: self,
            value,
            node: None,
        }
    }

    fn push(&self, node: Node<S>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records an op output. `backward` is only stored when some input is tracked.
    pub fn record<'t>(
        &'t self,
        value: Tensor<S>,
        inputs: &[&Var<'t, S>],
        backward: impl FnOnce(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Var<'t, S> {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        if parents.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let id = self.push(Node {
            parents,
            backward: Some(Box::new(backward)),
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self,
            value,
            node: Some(id),
        }
    }

    /// Reverse pass from a scalar loss. Consumes the recorded closures: a tape
    /// supports one backward pass.
    pub fn backward(&self, loss: &Var<'_, S>) -> Result<Gradients<S>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), S::one()));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                // leaf: keep its gradient
                grads[id] = Some(grad);
                continue;
            };
            let parents = node.parents.clone();
            let mask: Vec<bool> = parents.iter().map(Option::is_some).collect();
            let input_grads = backward(&grad, &mask);
            debug_assert_eq!(input_grads.len(), parents.len());
            for (parent, g) in parents.into_iter().zip(input_grads) {
                let (Some(pid), Some(g)) = (parent, g) else {
                    continue;
                };
                if g.shape() != nodes[pid].shape.as_slice() {
                    return Err(Error::Contract(format!(
                        "backward produced gradient of shape {:?} for node of shape {:?}",
                        g.shape(),
                        nodes[pid].shape
                    )));
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<S> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.value.clone())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// The gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: &Var<'_, S>) -> Option<&Tensor<S>> {
        var.node.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// The gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}
