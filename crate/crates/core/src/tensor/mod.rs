//! Dense row-major tensors and a small reverse-mode compute graph.
//!
//! The graph supports exactly the operations the encoders and contrastive
//! objectives need. There is no broadcasting: every binary op requires
//! identical shapes (or the matmul contraction rule), so shape errors are
//! reported at construction time with the offending node.

mod check;
mod graph;

pub use check::{finite_difference_check, FD_FLOOR};
pub use graph::{Evaluation, Gradients, Graph, NodeId, Op};

use thiserror::Error;

/// Row-norm threshold below which `l2_normalize_rows` leaves a row unchanged.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: input is not bound and has no value")]
    UnboundInput { node: usize },
    #[error("node {node}: bound tensor has shape {got:?}, expected {expected:?}")]
    BindingShape {
        node: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node {node} ({op}): non-finite value at flat index {index}")]
    NonFinite {
        node: usize,
        op: &'static str,
        index: usize,
    },
    #[error("node {node} is not part of this graph")]
    UnknownNode { node: usize },
    #[error("loss node {node} has shape {shape:?}, expected a scalar")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("evaluation does not belong to this graph; evaluate it first")]
    NotEvaluated,
    #[error("finite-difference epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

/// A dense tensor of 64-bit reals in row-major order.
///
/// Gradient tracking is a property of graph input nodes, not of the tensor
/// itself; gradients come back from [`Graph::backpropagate`] as tensors of the
/// same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, GraphError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != values.len() {
            return Err(GraphError::BadTensor {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    /// Builds a rows×cols matrix. Panics if `values.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], values).expect("matrix dimensions must match value count")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(GraphError::BadTensor {
                    shape: vec![rows.len(), cols],
                    len: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("shape with positive dimensions")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            values: vec![value],
        }
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows of a rank-2 tensor (first dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns: product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    /// The single value of a 1×1 (or any one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Selects rows by index into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Inner product with four interleaved partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a (m×k) · b (k×n)`, plain slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// `a (m×n) · bᵀ` where `b` is k×n; result m×k.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(ar, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `aᵀ · b` where `a` is m×k and `b` is m×n; result k×n.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}
