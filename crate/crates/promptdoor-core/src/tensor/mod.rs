//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The engine is a tape: a [`Graph`] records every operation in creation
//! order, so reverse topological order is simply reverse tape order.
//! Storage is 32-bit; every reduction (matmul inner products, softmax and
//! log-sum-exp sums, layer-norm statistics) accumulates in 64-bit before
//! rounding back, which keeps losses stable at the tiny scales this crate
//! trains at.
//!
//! The supported op set is fixed: matmul, add, mul, scale, transpose,
//! reshape, row gather, layer-norm, GELU, softmax, cross-entropy, dropout
//! (train-only), concat, slice, leading-axis expand, and the sum/mean
//! reductions the loss plumbing needs.

mod adam;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Gaussian init via Box-Muller, deterministic for a given rng state.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as f32 * std);
            if data.len() < numel {
                data.push((r * theta.sin()) as f32 * std);
            }
        }
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Replaces the gradient buffer, enforcing the shape invariant.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "set_grad",
                msg: format!("grad length {} != data length {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite values in {what}")));
        }
        Ok(())
    }
}
