//! Flat row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! Everything trainable in this crate differentiates through [`Tape`]: the
//! transformer, every loss variant, and the residual-MLP predictor. The tape
//! records ops in execution order and replays them in reverse on
//! [`Tape::backward`], accumulating gradients across fan-out.

pub(crate) mod math;
mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, Probe};
pub use tape::{Tape, Value};

use thiserror::Error;

/// Errors raised by tensor construction and tape ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {actual} does not match shape {shape:?} (expected {expected})")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: requires a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("cross-entropy: every position is masked out")]
    AllPositionsMasked,
    #[error("backward has already consumed this tape")]
    BackwardConsumed,
    #[error("backward root does not require grad")]
    RootHasNoGrad,
}

/// Dense row-major tensor. Parameter tensors own an optional gradient slot
/// that training loops accumulate into between optimizer steps; tensors
/// without a gradient slot are immutable values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable; leaves registered from it request
    /// gradients during backward.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Flips the trainable flag in place; turning it off drops any
    /// accumulated gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<(), TensorError> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: self.shape.clone(),
                expected: self.data.len(),
                actual: g.len(),
            });
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}
