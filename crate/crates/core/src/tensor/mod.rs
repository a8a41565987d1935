//! Dense 64-bit tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every value that flows through a model lives in a [`Graph`] as a node.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and one reverse sweep produces all leaf gradients.

mod check;
mod graph;

pub use check::{grad_check, grad_check_many};
pub use graph::{Axis, Gradients, Graph, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty input to {op}")]
    Empty { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("computation record is not topologically ordered at node {0}")]
    Cycle(usize),
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    /// Two-dimensional tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(TensorError::Empty { op: "from_rows" })?;
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape { op: "from_rows", detail: "ragged rows".into() });
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::matrix(1, n, values)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::matrix(1, 1, vec![value])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Self { shape: vec![rows, cols], data: vec![0.0; rows * cols], requires_grad: false }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut t = Self::zeros(rows, cols);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
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

    /// Mutable view for optimizers; values written here must stay finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view; rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Shape { op: "dims2", detail: format!("expected rank <= 2, got {s:?}") }),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row_slice(r).to_vec()).collect()
    }

    /// Column-wise mean, returned as a `1 x cols` tensor.
    pub fn column_means(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Tensor { shape: vec![1, c], data: out, requires_grad: false }
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(TensorError::Empty { op: "softmax" });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let mut out = vec![0.0; v.len()];
    kernels::softmax_row(v, &mut out);
    Ok(out)
}

/// `log(sum(exp(v)))` with max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(TensorError::Empty { op: "log_sum_exp" });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op: "log_sum_exp" });
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

/// Elementwise `ln(1 + e^x)`, strictly positive for finite input.
pub fn softplus(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op: "softplus" });
    }
    Ok(v.iter().map(|&x| kernels::softplus(x)).collect())
}

pub(crate) mod kernels {
    pub fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn softmax_row(v: &[f64], out: &mut [f64]) {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = (x - m).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    /// `a (m x k) * b`, where `b` is `k x n`, or `n x k` when `trans_b`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        if trans_b {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b[j * k..(j + 1) * k];
                    out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let br = &b[p * n..(p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(br) {
                        *o += av * bv;
                    }
                }
            }
        }
        out
    }

    /// `a^T (k x m) * b (m x n)` where `a` is stored as `m x k`.
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let br = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
        out
    }
}
