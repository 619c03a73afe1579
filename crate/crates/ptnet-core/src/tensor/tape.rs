use std::cell::RefCell;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{PtnetError, Result};

pub(crate) type NodeId = usize;

/// Backward rule for one recorded op: upstream gradient (flat, output-shaped)
/// in, one flat gradient per input out, aligned with the node's input list.
pub(crate) type Vjp<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;

struct Node<E: Element> {
    /// `None` marks an input that was not on the tape (constants); its
    /// gradient contribution is dropped.
    inputs: Vec<Option<NodeId>>,
    vjp: Option<Vjp<E>>,
}

struct TapeInner<E: Element> {
    nodes: Vec<Node<E>>,
    spent: bool,
}

/// Append-only record of forward operations.
///
/// Node ids are assigned in creation order, so the record is already a
/// topological order of the (acyclic) compute graph; `backward` walks it once
/// in reverse. A tape can be consumed by `backward` exactly once.
pub struct Tape<E: Element> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), spent: false })) }
    }

    pub(crate) fn ptr_eq(a: &Tape<E>, b: &Tape<E>) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a differentiable leaf and returns the tracked view.
    /// The data is shared; only the tape handle is new.
    pub fn watch(&self, t: &Tensor<E>) -> Tensor<E> {
        let id = self.record(Vec::new(), None);
        Tensor { shape: t.shape.clone(), data: t.data.clone(), node: Some((self.clone(), id)) }
    }

    pub(crate) fn record(&self, inputs: Vec<Option<NodeId>>, vjp: Option<Vjp<E>>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { inputs, vjp });
        inner.nodes.len() - 1
    }

    pub(crate) fn run_backward(&self, seed_node: NodeId) -> Result<Vec<Option<Vec<E>>>> {
        let mut inner = self.inner.borrow_mut();
        if inner.spent {
            return Err(PtnetError::Autodiff(
                "backward was already called on this tape; build a fresh tape per step".into(),
            ));
        }
        inner.spent = true;

        let mut grads: Vec<Option<Vec<E>>> = vec![None; inner.nodes.len()];
        grads[seed_node] = Some(vec![E::one()]);

        for id in (0..=seed_node).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &inner.nodes[id];
            let Some(vjp) = &node.vjp else { continue };
            let upstream = grads[id].as_ref().expect("grad present");
            let input_grads = vjp(upstream);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                let Some(src) = slot else { continue };
                match &mut grads[*src] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), g.len());
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(grads)
    }
}

/// Result of a backward pass: one gradient per tape node that received one.
pub struct Gradients<E: Element> {
    tape: Tape<E>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub(crate) fn new(tape: Tape<E>, grads: Vec<Option<Vec<E>>>) -> Self {
        Gradients { tape, grads }
    }

    /// Gradient of the loss w.r.t. `t`, or `None` when `t` is not on this
    /// tape or no gradient reached it (disconnected from the loss).
    pub fn wrt(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        let (tape, id) = t.node.as_ref()?;
        if !Tape::ptr_eq(tape, &self.tape) {
            return None;
        }
        let g = self.grads.get(*id)?.as_ref()?;
        Some(Tensor::raw(t.shape.clone(), g.clone()))
    }

    /// Like [`Gradients::wrt`] but moves the buffer out.
    pub fn take_wrt(&mut self, t: &Tensor<E>) -> Option<Vec<E>> {
        let (tape, id) = t.node.as_ref()?;
        if !Tape::ptr_eq(tape, &self.tape) {
            return None;
        }
        self.grads.get_mut(*id)?.take()
    }
}

impl<E: Element> Tensor<E> {
    /// Reverse-mode sweep from a scalar loss. Errors if the tensor is not on
    /// a tape, is not a scalar, or the tape was already consumed.
    pub fn backward(&self) -> Result<Gradients<E>> {
        let (tape, id) = self.node.as_ref().ok_or_else(|| {
            PtnetError::Autodiff("backward on a tensor that is not on any tape".into())
        })?;
        if self.numel() != 1 {
            return Err(PtnetError::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let grads = tape.run_backward(*id)?;
        Ok(Gradients::new(tape.clone(), grads))
    }
}
