use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Computes input gradients from `(grad_output, inputs, output, needs_grad)`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of a computation. Nodes are stored in creation order, so
/// the vector order is already a topological order of the (acyclic) graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.idx];
        write!(f, "Var#{}({}, {:?})", self.idx, n.op, n.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            op: "const",
            value,
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.idx].requires_grad)
        };
        self.push_node(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.idx).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    pub(crate) fn value_ref(&self, idx: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    /// Reverse-mode sweep from a scalar `root`. Each node reachable from the
    /// root is visited once, in reverse creation order.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.idx];
        if root_node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(Tensor::full(root_node.value.shape().to_vec(), 1.0));
        for i in (0..=root.idx).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad of {}", node.op);
                match grads[p].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => grads[p] = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.idx).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.idx).shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.idx).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when `v` did not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}
