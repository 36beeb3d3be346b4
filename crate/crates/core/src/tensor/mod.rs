//! Dense `f32` tensors and the reverse-mode autodiff graph built on them.
//!
//! Layout is always row-major; image batches use NCHW. A [`Tensor`] owns its
//! buffer, an optional gradient buffer of identical length, and a
//! `requires_grad` flag. Differentiable computations are staged on a
//! [`Graph`], which owns every intermediate tensor and replays the recorded
//! operations in reverse to accumulate gradients.

mod conv;
mod graph;
mod loss;
pub(crate) mod mat;
mod norm;
mod ops;
mod pool;

pub use conv::conv2d_raw;
pub use graph::{Graph, Op, TensorId};
pub use loss::softmax_probs;
pub use norm::batchnorm_infer;
pub use ops::{linear_raw, masked_sigmoid_raw, relu_raw, sigmoid_raw};
pub use pool::{avgpool2d_raw, maxpool2d_raw, unpool2d_raw, PoolIndices};

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor. Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, buffer holds {}",
                    shape,
                    expect,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Interprets the tensor as an image batch, returning (n, c, h, w).
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected 4-d NCHW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape {
            [n, m] => Ok((n, m)),
            _ => Err(Error::shape(
                op,
                format!("expected 2-d tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f32>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }
}

/// Fails unless both tensors share a shape; names the first differing axis.
pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        let axis = a
            .shape
            .iter()
            .zip(&b.shape)
            .position(|(x, y)| x != y)
            .unwrap_or_else(|| a.shape.len().min(b.shape.len()));
        return Err(Error::shape(
            op,
            format!(
                "operands differ at axis {axis}: {:?} vs {:?}",
                a.shape, b.shape
            ),
        ));
    }
    Ok(())
}
