use std::sync::Arc;

use super::kernels::{self, same_shape};
use super::{Backend, CustomOp, ParamId, ParamStore, Tensor};

/// Eager evaluation: values are plain tensors, nothing is recorded.
#[derive(Debug, Clone, Copy)]
pub struct Eval<'p> {
    store: &'p ParamStore,
}

impl<'p> Eval<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store }
    }
}

impl Backend for Eval<'_> {
    type V = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, id: ParamId) -> Tensor {
        self.store.get(id).clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        kernels::matmul(a, b)
    }

    fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Tensor {
        kernels::add_row(a, bias)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape(a, b, "add");
        a.zip_map(b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape(a, b, "sub");
        a.zip_map(b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape(a, b, "mul");
        a.zip_map(b, |x, y| x * y)
    }

    fn mul_const(&mut self, a: &Tensor, c: &Arc<Tensor>) -> Tensor {
        same_shape(a, c, "mul_const");
        a.zip_map(c, |x, y| x * y)
    }

    fn scale(&mut self, a: &Tensor, k: f64) -> Tensor {
        a.map(|x| x * k)
    }

    fn add_scalar(&mut self, a: &Tensor, k: f64) -> Tensor {
        a.map(|x| x + k)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        a.map(kernels::relu)
    }

    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::tanh)
    }

    fn exp(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::exp)
    }

    fn log(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::ln)
    }

    fn softplus(&mut self, a: &Tensor) -> Tensor {
        a.map(kernels::softplus)
    }

    fn square(&mut self, a: &Tensor) -> Tensor {
        a.map(|x| x * x)
    }

    fn softmax(&mut self, a: &Tensor) -> Tensor {
        kernels::softmax_rows(a)
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }

    fn mean(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum() / a.len() as f64)
    }

    fn sum_cols(&mut self, a: &Tensor) -> Tensor {
        kernels::sum_cols(a)
    }

    fn select_cols(&mut self, a: &Tensor, idx: &[usize]) -> Tensor {
        a.select_cols(idx)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = parts.iter().collect();
        kernels::concat_cols(&refs)
    }

    fn custom(&mut self, inputs: &[&Tensor], op: Arc<dyn CustomOp>) -> Tensor {
        op.forward(inputs)
    }
}
