//! Dense f64 tensors with a tape-based reverse-mode graph, the layers the
//! predictor needs, optimizers, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod layers;
mod optim;

pub use gradcheck::{grad_check, numeric_grad, GRAD_CHECK_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    attention, dense, dropout_mask, glorot_uniform, lstm_step, orthogonal, softmax,
    AttentionOutput, LstmActivation, LstmParams, LstmVars,
};
pub use optim::{clip_global_norm, AdamState, SgdMomentum};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("index {index} out of bounds for {len} rows")]
    OutOfBounds { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// Row-major dense tensor. Deserialization goes through [`Tensor::new`], so a
/// loaded tensor is always consistent and finite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;
    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len()) {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }
}
