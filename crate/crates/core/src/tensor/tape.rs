//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its forward value,
//! the ids of its inputs and a closure computing vector-Jacobian products.
//! Node ids are assigned in creation order, so a single reverse sweep over
//! the ids visits the graph in topological order.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::NdArray;
use crate::error::{Error, Result};

/// Computes the gradient contribution for each input from the output gradient.
///
/// Arguments: output gradient, input values, output value, and which inputs
/// need a gradient. Entries for inputs that do not need one may be `None`.
pub(crate) type BackwardFn =
    Box<dyn Fn(&NdArray, &[&NdArray], &NdArray, &[bool]) -> Vec<Option<NdArray>>>;

struct Node {
    op: &'static str,
    value: Rc<NdArray>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<NdArray>>,
    swept: bool,
}

/// A differentiation tape. Cloning shares the same underlying tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: NdArray) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: NdArray) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: NdArray, requires_grad: bool) -> Var {
        self.push(Node {
            op: "leaf",
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Records the result of an operation. Fails if `value` holds a
    /// non-finite entry, naming the operation and the node it would occupy.
    pub(crate) fn record(
        &self,
        op: &'static str,
        parents: &[&Var],
        value: NdArray,
        backward: BackwardFn,
    ) -> Result<Var> {
        for p in parents {
            if !Rc::ptr_eq(&p.tape.inner, &self.inner) {
                return Err(Error::ForeignTape);
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op,
                node: self.len(),
            });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(self.push(Node {
            op,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        }))
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.iter_mut().for_each(|g| *g = None);
        inner.swept = false;
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.swept {
            return Err(Error::BackwardTwice);
        }
        let root_shape = inner.nodes[root].value.shape().to_vec();
        if inner.nodes[root].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        inner.swept = true;
        let TapeInner { nodes, grads, .. } = &mut *inner;
        grads[root] = Some(NdArray::ones(&root_shape));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            if let Some(&parent) = node.parents.iter().find(|&&p| p >= id) {
                return Err(Error::Cycle { node: id, parent });
            }
            let inputs: Vec<&NdArray> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contribs = backward(&grad_out, &inputs, &node.value, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len(), "{}", node.op);
            for ((&p, need), g) in node.parents.iter().zip(&needs).zip(contribs) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "{} grad", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<NdArray> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient accumulated by the last backward sweep. Only leaves keep
    /// their gradients; interior nodes release them once propagated.
    pub fn grad(&self) -> Option<NdArray> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Runs the reverse sweep from this scalar node.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }
}
