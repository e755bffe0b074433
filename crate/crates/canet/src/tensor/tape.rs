//! Wengert-list tape for reverse-mode differentiation.
//!
//! Ops append one node per output; the append order is the topological
//! order, so `backward` walks the list once in reverse. Leaves are
//! parameters; their gradients accumulate additively across uses, which is
//! what makes the siamese encoder (same weights applied to both temporal
//! inputs) differentiate correctly.

use std::collections::HashMap;
use std::sync::Arc;

use super::optim::Parameter;
use super::{ensure_finite, Dims, Elem, Tensor};
use crate::error::{Error, Result};

/// Backward function of one recorded op: maps the node's output gradient to
/// contributions on parent nodes, identified by node id.
pub(crate) type BackwardFn<E> = Box<dyn FnOnce(&[E]) -> Vec<(usize, Vec<E>)>>;

enum NodeKind<E: Elem> {
    /// A watched parameter; backward deposits the gradient into it.
    Leaf(Parameter<E>),
    /// A recorded op; `None` after its backward has run.
    Op(Option<BackwardFn<E>>),
}

struct Node<E: Elem> {
    kind: NodeKind<E>,
}

/// Recording context for one forward/backward pass.
///
/// One tape is active per training step; pure inference uses a non-recording
/// tape, which makes every op skip bookkeeping.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    leaves: HashMap<usize, usize>,
    recording: bool,
    consumed: bool,
    checked: bool,
}

impl<E: Elem> Tape<E> {
    /// A tape that records ops for a later `backward` call.
    pub fn recording() -> Self {
        Tape { nodes: Vec::new(), leaves: HashMap::new(), recording: true, consumed: false, checked: false }
    }

    /// A tape that records nothing; forward evaluation only.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), leaves: HashMap::new(), recording: false, consumed: false, checked: false }
    }

    /// Enable non-finite detection on every op output (debug aid).
    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Bring a parameter onto the tape.
    ///
    /// Trainable parameters become leaf nodes; watching the same parameter
    /// twice returns the same leaf, so gradients from multiple uses
    /// accumulate. Non-trainable parameters enter as plain constants, which
    /// prunes gradient work for frozen model parts.
    pub fn watch(&mut self, param: &Parameter<E>) -> Tensor<E> {
        let value = param.value();
        if !self.recording || !param.trainable() {
            return value;
        }
        let id = match self.leaves.get(&param.id()) {
            Some(&id) => id,
            None => {
                let id = self.nodes.len();
                self.nodes.push(Node { kind: NodeKind::Leaf(param.clone()) });
                self.leaves.insert(param.id(), id);
                id
            }
        };
        Tensor::from_parts(value.dims(), value.data_arc(), Some(id))
    }

    /// Finish an op: optionally scan for non-finite values, record the
    /// backward function when the tape is live and the op had tracked
    /// parents, and wrap the output buffer as a tensor.
    pub(crate) fn finish(
        &mut self,
        op: &'static str,
        dims: Dims,
        data: Arc<Vec<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Result<Tensor<E>> {
        if self.checked {
            ensure_finite(op, &data)?;
        }
        let node = match backward {
            Some(bf) if self.recording => {
                let id = self.nodes.len();
                self.nodes.push(Node { kind: NodeKind::Op(Some(bf)) });
                Some(id)
            }
            _ => None,
        };
        Ok(Tensor::from_parts(dims, data, node))
    }

    /// Run reverse-mode accumulation from a scalar loss.
    ///
    /// Every trainable leaf reachable from the loss receives its gradient;
    /// watched leaves that the loss does not depend on are left with zeros.
    /// A tape can be consumed only once.
    pub fn backward(&mut self, loss: &Tensor<E>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if loss.dims().count() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got dims {}", loss.dims()),
            });
        }
        let root = loss.node().ok_or(Error::NotRecorded)?;

        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![E::one()]);

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else { continue };
            match &mut self.nodes[id].kind {
                NodeKind::Leaf(param) => param.accumulate_grad(&grad),
                NodeKind::Op(slot) => {
                    let bf = slot.take().expect("op backward runs once");
                    for (parent, contribution) in bf(&grad) {
                        debug_assert!(parent < id, "tape order violated");
                        match &mut grads[parent] {
                            Some(buf) => {
                                for (a, b) in buf.iter_mut().zip(&contribution) {
                                    *a = *a + *b;
                                }
                            }
                            slot @ None => *slot = Some(contribution),
                        }
                    }
                }
            }
        }

        // Watched-but-unreached leaves still count as populated (with zeros).
        for node in &self.nodes {
            if let NodeKind::Leaf(param) = &node.kind {
                param.mark_grad_populated();
            }
        }
        Ok(())
    }
}
