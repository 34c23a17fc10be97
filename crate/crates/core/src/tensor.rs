//! Dense row-major tensor storage.
//!
//! `Tensor` is plain data: a shape and a flat scalar buffer. Gradient
//! bookkeeping lives on the [`crate::tape::Tape`]; frozen values (embedding
//! tables, checkpointed parameters) are immutable and safe to share across
//! threads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    /// Row vector [1 x n].
    pub fn row(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// Matrix [rows x cols] from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Number of rows when viewed as 2-D (all tape tensors are 2-D).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Single contained value; panics unless the tensor is 1x1.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Convert every element, e.g. to build an f64 twin for gradient checks.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }
}
