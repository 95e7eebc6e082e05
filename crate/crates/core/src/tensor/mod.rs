//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Storage is row-major and flat, with no strided views: slicing and
//! concatenation copy. Tensors of rank two are treated as matrices; rank-one
//! tensors of length `n` behave as `1 x n` rows where an op needs a matrix.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;

use std::fmt;

pub use checkpoint::{config_hash, Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_FORMAT};
pub use gradcheck::{check_gradients, check_param_gradients, rel_error, GradReport, REL_ERROR_FLOOR};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type TResult<T> = Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.data.len().min(8);
        write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..n])?;
        if self.data.len() > n {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> TResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()], requires_grad: false }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> TResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(TensorError::Invalid { op: "from_rows", message: "ragged rows".into() });
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn with_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Product of all dimensions but the last.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> TResult<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dense `rows x cols` matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> TResult<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 || self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: self.shape.clone(), right: rhs.shape.clone() });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out, requires_grad: false }
    }
}

/// `out += a (m x k) * b (k x n)`; each output row depends only on its own
/// input row, accumulated in ascending `k`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_fixture() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        // [1*7+2*9+3*11, 1*8+2*10+3*12; 4*7+5*9+6*11, 4*8+5*10+6*12]
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(matches!(a.matmul(&a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn constructors_check_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert_eq!(Tensor::zeros(&[3, 2]).rows(), 3);
        assert_eq!(Tensor::scalar(2.0).item(), 2.0);
        assert_eq!(Tensor::zeros(&[4]).cols(), 4);
    }
}
