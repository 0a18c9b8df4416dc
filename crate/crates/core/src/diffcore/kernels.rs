// Forward kernels shared by `Eval` and `Tape`.

use super::{gemm, GemmOperand, Tensor};

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    a.matmul(b).unwrap_or_else(|e| panic!("{e}"))
}

pub(crate) fn add_row(a: &Tensor, bias: &Tensor) -> Tensor {
    let m = a.cols();
    assert_eq!(bias.len(), m, "add_row: bias width {} vs {}", bias.len(), m);
    let mut out = a.clone();
    let b = bias.data();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (o, &v) in row.iter_mut().zip(b) {
            *o += v;
        }
    }
    out
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{what}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let m = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn sum_cols(a: &Tensor) -> Tensor {
    let m = a.cols();
    Tensor::vector(a.data().chunks_exact(m).map(|r| r.iter().sum()).collect())
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let n = parts.first().map_or(0, |p| p.rows());
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        for p in parts {
            assert_eq!(p.rows(), n, "concat_cols: row count mismatch");
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(n, width, out)
}

/// `g · bᵀ` for the left operand of a product `a · b`.
pub(crate) fn matmul_grad_lhs(g: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (g.rows(), g.cols());
    let k = b.rows();
    let mut out = vec![0.0; n * k];
    gemm(
        n,
        m,
        k,
        1.0,
        GemmOperand::normal(g.data(), m),
        GemmOperand::transposed(b.data(), m),
        0.0,
        &mut out,
    );
    Tensor::matrix(n, k, out)
}

/// `aᵀ · g` for the right operand of a product `a · b`.
pub(crate) fn matmul_grad_rhs(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = g.cols();
    let mut out = vec![0.0; k * m];
    gemm(
        k,
        n,
        m,
        1.0,
        GemmOperand::transposed(a.data(), k),
        GemmOperand::normal(g.data(), m),
        0.0,
        &mut out,
    );
    Tensor::matrix(k, m, out)
}
