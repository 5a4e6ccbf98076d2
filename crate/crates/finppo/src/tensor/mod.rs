//! Dense f64 tensors with explicit reverse-mode gradients.
//!
//! Every layer primitive lives here as a pair of free functions: a forward
//! pass that returns its output (plus whatever context the adjoint needs) and
//! a backward pass that maps an output gradient to input/parameter gradients.
//! There is no tape; composite networks chain the backward calls themselves.
//!
//! Determinism contract: all reductions run in a fixed, documented order, so
//! a given op sequence produces bitwise-identical results on every run and
//! platform. Parallel code paths (feature `parallel`) only ever distribute
//! writes to disjoint output slices; they never reorder a summation.

mod conv;
mod dense;
mod gaussian;
mod norm;
mod optim;

pub mod checkpoint;

pub use conv::{
    conv2d_backward, conv2d_backward_batch, conv2d_forward, conv2d_forward_batch,
    conv2d_forward_seq, conv_out_dim, maxpool2d_backward, maxpool2d_forward, MaxPoolCtx,
};
pub use dense::{
    dense_backward, dense_backward_batch, dense_forward, dense_forward_batch, relu, relu_backward,
};
pub use gaussian::{gaussian_entropy, gaussian_head, gaussian_log_prob, gaussian_sample};
pub use norm::{
    batchnorm_backward, batchnorm_forward, column_normalize, column_normalize_backward,
    dropout_apply_mask, dropout_forward, BatchNormCtx, ColumnNormCtx, RunningStats,
};
pub use optim::{adam_step, clip_grad_norm, global_grad_norm, sgd_step, AdamState};

use crate::error::{Error, Result};

/// Forward-pass mode for layers whose behaviour differs between training and
/// inference (batch norm, dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// An n-dimensional array of f64 in row-major order, optionally carrying a
/// same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                reason: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            grad: None,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Allocate the gradient buffer (zeroed) if absent.
    pub fn with_grad(mut self) -> Self {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(0.0);
        }
    }

    /// Same data, new shape (element count must match). Gradient buffers do
    /// not travel across a reshape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Row-major multi-index lookup, for tests and small consumers.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            off = off * self.shape[d] + i;
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}
