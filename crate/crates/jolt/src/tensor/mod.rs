//! Dense f64 tensors and reverse-mode differentiation.
//!
//! The design is define-by-run: a [`Tape`] records every op as it executes,
//! [`Tape::backward`] replays the record once in reverse. Values are plain
//! row-major `Vec<f64>`; the op set is deliberately small (conv, transposed
//! conv, linear, relu, the two pools, flatten, add/scale/mul, temperature
//! softmax, log, sum/mean, and a fused smoothed cross entropy) because that
//! is everything the networks here need, and every op carries an oracle test.
//!
//! Double precision is load-bearing: it is what lets the whole training loss
//! be validated against central finite differences at 1e-4 relative error.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_detailed, FiniteDiffReport};
pub use tape::{Tape, Var};

use crate::{Error, Result};

/// A shaped block of f64 values. Immutable during a forward pass; the
/// optimizer mutates parameter tensors between passes. `grad` is filled by
/// harvesting from a tape after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!(
                    "shape {:?} holds {} elements, data has {}",
                    shape,
                    expect,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "grad length mismatch");
        }
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the same data under a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Stacks equally-shaped tensors along a new leading batch dimension.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::InvalidArg("stack of zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for (i, t) in items.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "stack",
                    detail: format!("item {i} has shape {:?}, expected {:?}", t.shape(), first.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&shape, data)
    }
}
