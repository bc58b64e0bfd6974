//! Dense row-major f64 tensor with an optional gradient accumulator.

use crate::error::{Error, Result};

/// Product of shape extents.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense tensor. Values are row-major; the gradient accumulator, when
/// present, always has the same shape as the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/value contract: every extent is
    /// positive, the value count matches the shape product, and every value
    /// is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Numerical(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        if numel(&shape) != values.len() {
            return Err(Error::Shape {
                op: "tensor construction",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor construction with shape {shape:?}"),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    /// Mark as trainable, allocating a zeroed gradient accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Add `delta` into the gradient accumulator. No-op without one.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = self.grad.as_deref_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(0.0);
        }
    }
}
