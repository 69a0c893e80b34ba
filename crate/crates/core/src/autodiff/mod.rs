//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in the order
//! it happens. [`Tape::backward`] walks that record once, newest first, and
//! accumulates gradients into the leaves created with [`Tape::param`].
//! Constants (created with [`Tape::constant`]) and anything computed only from
//! constants never receive gradient.
//!
//! A tape is single-threaded (`!Sync`); independent model replicas each build
//! their own.

mod check;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

pub use check::finite_difference_check;
pub use ops::MASK_NEG;
pub(crate) use ops::log_softmax_row;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Context handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to the op's output.
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs[i]` is true when input `i` requires a gradient.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input; `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    name: &'static str,
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    debug: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that fails any op producing a non-finite value.
    pub fn debug() -> Self {
        Self {
            nodes: RefCell::default(),
            debug: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.clone(), true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    fn leaf(&self, mut t: Tensor, requires_grad: bool) -> Var<'_> {
        t.zero_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            name: "leaf",
            value: Rc::new(t),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            is_leaf: true,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a custom operation. `backward` is dropped when no input
    /// requires gradient.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if self.debug && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            name,
            value: Rc::new(value),
            inputs: ids,
            backward: requires_grad.then_some(backward),
            requires_grad,
            is_leaf: false,
            grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Propagates d(loss)/d(node) back to every gradient-requiring leaf.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.is_leaf {
                if node.requires_grad {
                    let leaf = &mut nodes[id];
                    match &mut leaf.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => leaf.grad = Some(g),
                    }
                }
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.inputs.iter().map(|&i| &*nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.name);
            let inputs = node.inputs.clone();
            for (&input, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
