//! The autodiff tape: an arena of tensors plus an ordered list of recorded
//! operations.
//!
//! `backward` walks the records once, newest first. Because an operation is
//! always recorded after the operations that produced its inputs, every
//! consumer of a node is visited before the node itself, so gradient
//! contributions from multiple consumers have all been accumulated by the
//! time the producing record runs. Gradients flow only into nodes with
//! `requires_grad` set; the flag propagates from inputs to outputs at record
//! time.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle into a [`Graph`]'s tensor arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A differentiable operation. `forward` may stash whatever context `backward`
/// needs (pooling argmaxes, dropout masks, softmax probabilities, ...).
pub trait Op {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns one gradient buffer per input, or `None` where `needs[i]` is
    /// false (the caller will not use it). `grad_out` has the output's length.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

struct OpRecord {
    op: Box<dyn Op>,
    inputs: Vec<TensorId>,
    output: TensorId,
}

/// Arena + tape. Owns every tensor that participates in a differentiable
/// computation for the duration of one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    records: Vec<OpRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Moves a tensor into the arena without recording an operation.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.nodes.push(t);
        TensorId(self.nodes.len() - 1)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad()
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].data()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].len(), 1);
        self.nodes[id.0].data()[0]
    }

    /// Runs `op` on existing nodes, records it, and returns the output id.
    pub fn apply(&mut self, mut op: Box<dyn Op>, inputs: &[TensorId]) -> Result<TensorId> {
        let refs: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0]).collect();
        let mut out = op.forward(&refs)?;
        out.requires_grad = refs.iter().any(|t| t.requires_grad);
        drop(refs);
        self.nodes.push(out);
        let output = TensorId(self.nodes.len() - 1);
        self.records.push(OpRecord {
            op,
            inputs: inputs.to_vec(),
            output,
        });
        Ok(output)
    }

    /// Records an operation whose output was already computed by the caller
    /// (used when the forward pass produces side products the caller needs,
    /// e.g. pooling indices).
    pub(crate) fn record_precomputed(
        &mut self,
        op: Box<dyn Op>,
        inputs: &[TensorId],
        mut output: Tensor,
    ) -> TensorId {
        output.requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(output);
        let output = TensorId(self.nodes.len() - 1);
        self.records.push(OpRecord {
            op,
            inputs: inputs.to_vec(),
            output,
        });
        output
    }

    /// Reverse pass from a scalar loss. Visits each record exactly once in
    /// reverse insertion order; gradient buffers accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    loss_node.shape()
                ),
            ));
        }
        self.nodes[loss.0].set_grad(vec![1.0]);

        let records = &self.records;
        let nodes = &mut self.nodes;
        for rec in records.iter().rev() {
            let Some(grad_out) = nodes[rec.output.0].take_grad() else {
                continue;
            };
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|id| nodes[id.0].requires_grad)
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let grads = {
                let ins: Vec<&Tensor> = rec.inputs.iter().map(|id| &nodes[id.0]).collect();
                let out = &nodes[rec.output.0];
                rec.op.backward(&ins, out, &grad_out, &needs)
            };
            debug_assert_eq!(grads.len(), rec.inputs.len());
            for (slot, g) in grads.into_iter().enumerate() {
                if let Some(g) = g {
                    let node = &mut nodes[rec.inputs[slot].0];
                    if node.requires_grad {
                        node.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }
}
