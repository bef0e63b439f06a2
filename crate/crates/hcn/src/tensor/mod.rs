//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is row-major `f64`. The model math only ever needs matrices
//! (scalars are 1×1, vectors 1×D), so the tape works on 2-D values; the
//! [`Tensor`] type itself accepts up to three axes.

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use params::{glorot_uniform, normal_init, ParamId, ParamSet, Parameter};
pub use tape::{Tape, VarId};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: expected scalar (1x1), got {rows}x{cols}")]
    NotScalar {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("label must be 0 or 1, got {0}")]
    NonBinaryLabel(f64),
    #[error("row index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("{op}: column range {from}..{to} invalid for width {cols}")]
    BadColumnRange {
        op: &'static str,
        from: usize,
        to: usize,
        cols: usize,
    },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("tensor of rank {0} not supported here (expected rank <= 2)")]
    RankTooHigh(usize),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

/// Dense real-valued tensor. `grad` is allocated (zeroed) iff `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        if shape.len() > 3 {
            return Err(TensorError::RankTooHigh(shape.len()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Row vector 1×n.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// (rows, cols) view of a rank ≤ 2 tensor; rank-1 counts as a row vector.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            r => Err(TensorError::RankTooHigh(r)),
        }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
