use std::sync::{Arc, Mutex};

use super::primitive::{self, Operand, Primitive};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle from a tracked tensor into its tape.
#[derive(Clone)]
pub(crate) struct NodeRef {
    tape: Arc<Mutex<TapeInner>>,
    id: usize,
}

enum NodeKind {
    Leaf,
    Op(Primitive),
}

struct Node {
    kind: NodeKind,
    /// Tape ids of the inputs; `None` for untracked constants.
    inputs: Vec<Option<usize>>,
    /// Detached input values, saved for the reverse pass.
    saved: Vec<Tensor>,
    output: Tensor,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of primitive applications. Node inputs always
/// precede the node itself.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as a differentiable leaf on this tape.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let mut inner = self.inner.lock().unwrap();
        let id = inner.nodes.len();
        let detached = value.detach();
        inner.nodes.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            saved: Vec::new(),
            output: detached.clone(),
        });
        Tensor {
            node: Some(NodeRef {
                tape: Arc::clone(&self.inner),
                id,
            }),
            ..detached
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(super) fn record(prim: Primitive, inputs: &[&Tensor], out: Tensor) -> Result<Tensor> {
    let tape = inputs
        .iter()
        .find_map(|t| t.node.as_ref())
        .map(|n| Arc::clone(&n.tape))
        .expect("record called without tracked input");
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        match &t.node {
            Some(n) if !Arc::ptr_eq(&n.tape, &tape) => return Err(Error::TapeMismatch),
            Some(n) => ids.push(Some(n.id)),
            None => ids.push(None),
        }
    }
    let mut inner = tape.lock().unwrap();
    let id = inner.nodes.len();
    inner.nodes.push(Node {
        kind: NodeKind::Op(prim),
        inputs: ids,
        saved: inputs.iter().map(|t| t.detach()).collect(),
        output: out.clone(),
    });
    drop(inner);
    Ok(Tensor {
        node: Some(NodeRef { tape, id }),
        ..out
    })
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    tape: Arc<Mutex<TapeInner>>,
    grads: Vec<Option<Vec<f32>>>,
    leaves: Vec<usize>,
}

impl Gradients {
    /// Gradient of `leaf`; zeros when the loss does not depend on it.
    /// `None` when `leaf` is not a leaf of this tape.
    pub fn get(&self, leaf: &Tensor) -> Option<Tensor> {
        let node = leaf.node.as_ref()?;
        if !Arc::ptr_eq(&node.tape, &self.tape) || self.leaves.binary_search(&node.id).is_err() {
            return None;
        }
        Some(match self.grads.get(node.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(leaf.shape.clone(), g.clone()),
            None => Tensor::zeros(&leaf.shape),
        })
    }

    /// Number of leaves that received a nonzero contribution.
    pub fn reached(&self) -> usize {
        self.leaves
            .iter()
            .filter(|&&id| self.grads[id].is_some())
            .count()
    }
}

pub(super) fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape.clone()));
    }
    let node = loss.node.as_ref().ok_or(Error::DetachedLoss)?;
    let inner = node.tape.lock().unwrap();
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; node.id + 1];
    grads[node.id] = Some(vec![1.0]);
    for id in (0..=node.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let n = &inner.nodes[id];
        let prim = match &n.kind {
            NodeKind::Leaf => {
                grads[id] = Some(g);
                continue;
            }
            NodeKind::Op(p) => p,
        };
        let operands: Vec<Operand<'_>> = n
            .saved
            .iter()
            .map(|t| Operand {
                shape: &t.shape,
                data: &t.data,
            })
            .collect();
        let out = Operand {
            shape: &n.output.shape,
            data: &n.output.data,
        };
        for (which, input) in n.inputs.iter().enumerate() {
            let Some(src) = *input else { continue };
            let acc = grads[src].get_or_insert_with(|| vec![0.0; n.saved[which].numel()]);
            primitive::vjp(prim, &operands, out, &g, which, acc);
        }
    }
    let leaves = inner
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.kind, NodeKind::Leaf))
        .map(|(i, _)| i)
        .collect();
    drop(inner);
    Ok(Gradients {
        tape: Arc::clone(&node.tape),
        grads,
        leaves,
    })
}
