//! Dense-matrix values with reverse-mode automatic differentiation.
//!
//! The building blocks are deliberately small: a [`Tensor`] is a row-major
//! `f64` matrix that may carry a gradient buffer, a [`Tape`](tape::Tape)
//! records forward operations and replays them backwards, and
//! [`Adam`](adam::Adam) consumes the resulting gradients. Everything runs in
//! 64-bit floats so finite-difference checks stay meaningful.

pub mod adam;
pub mod rng;
pub mod sparse;
pub mod tape;

pub use adam::{Adam, AdamParams};
pub use rng::{gumbel_noise, SeedSplitter};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Value};

use crate::error::{Error, Result};

/// A dense row-major matrix of `f64`, optionally tracking a gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Tensor {
            rows,
            cols,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            values: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged rows in tensor literal".into()));
            }
            values.extend_from_slice(row);
        }
        Tensor::new(r, c, values)
    }

    /// Glorot-uniform initialization: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, seed: u64) -> Self {
        let values = rng::glorot_uniform(rows, cols, seed);
        Tensor {
            rows,
            cols,
            values,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Clear the gradient buffer. Callers zero grads explicitly between steps.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient buffer. `None` deltas (tensor unreachable
    /// from the loss) accumulate zeros, so a detached tensor keeps a zero grad.
    pub fn accumulate_grad(&mut self, delta: Option<&[f64]>) -> Result<()> {
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![0.0; n]);
        if let Some(delta) = delta {
            if delta.len() != n {
                return Err(Error::Dimension(format!(
                    "gradient length {} does not match tensor size {n}",
                    delta.len()
                )));
            }
            for (g, d) in grad.iter_mut().zip(delta) {
                *g += d;
            }
        }
        Ok(())
    }
}
