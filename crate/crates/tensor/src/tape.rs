use crate::error::{Result, TensorError};
use crate::ops::{self, Op, Saved};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Record {
    op: Op,
    inputs: Vec<Var>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, so every recorded op's inputs
/// have smaller ids than its output and reverse id order is a valid
/// topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a leaf on the tape; it requires a gradient iff the tensor does.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `op` forward. The op is recorded for backward only when at least
    /// one input requires a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (value, saved, requires_grad) = {
            let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let (value, saved) = ops::forward(&op, &tensors)?;
            let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
            (value, saved, requires_grad)
        };
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|v| v.0 < id));
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
            saved,
        });
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Ok(Var(id))
    }

    /// Ids of `(inputs, output)` for every recorded op, in recording order.
    pub fn recorded_edges(&self) -> Vec<(Vec<usize>, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| {
                n.record
                    .as_ref()
                    .map(|r| (r.inputs.iter().map(|v| v.0).collect(), id))
            })
            .collect()
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(record) = self.nodes[id].record.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = record.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = record
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = ops::backward(
                &record.op,
                &inputs,
                &self.nodes[id].value,
                &record.saved,
                &grad,
                &need,
            );
            for (v, g) in record.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[v.0] = Some(g),
                }
            }
        }
        // keep gradients for leaves only
        for (id, node) in self.nodes.iter().enumerate() {
            if node.record.is_some() || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when the leaf did not
    /// influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, like: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(like))
    }
}
