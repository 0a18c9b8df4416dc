//! Dense row-major `f64` tensors.
//!
//! Only what the flows need: 1-D vectors, 2-D batched matrices and scalars
//! (shape `[]`). Matrix products go through `matrixmultiply::dgemm`.

use serde::{Deserialize, Serialize};

use super::DiffError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows x cols` matrix. Panics if the length does not match.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a 2-D tensor (the length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DiffError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Columns `idx` of a 2-D tensor, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(n * idx.len());
        for r in 0..n {
            let row = &self.data[r * m..(r + 1) * m];
            out.extend(idx.iter().map(|&c| row[c]));
        }
        Self::matrix(n, idx.len(), out)
    }

    /// Stacks row ranges of equal width.
    pub fn concat_rows(parts: &[Tensor]) -> Self {
        let cols = parts.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows width mismatch");
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, cols, data)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                out[c * n + r] = self.data[r * m + c];
            }
        }
        Self::matrix(m, n, out)
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(DiffError::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            1.0,
            GemmOperand::normal(&self.data, k),
            GemmOperand::normal(&other.data, m),
            0.0,
            &mut out,
        );
        Ok(Tensor::matrix(n, m, out))
    }
}

/// A row-major matrix view, optionally read as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct GemmOperand<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> GemmOperand<'a> {
    /// Row-major matrix with `cols` columns.
    pub(crate) fn normal(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub(crate) fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out = alpha * a · b + beta * out` with `a: n x k`, `b: k x m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    n: usize,
    k: usize,
    m: usize,
    alpha: f64,
    a: GemmOperand<'_>,
    b: GemmOperand<'_>,
    beta: f64,
    out: &mut [f64],
) {
    assert_eq!(out.len(), n * m);
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the operands are slices whose extents were checked by callers
    // against (n, k) and (k, m) with the given strides; `out` is n x m
    // row-major.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}
