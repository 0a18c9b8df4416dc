//! Dense tensors, reverse-mode differentiation, MLPs and the Adam optimizer.
//!
//! Model code is written once against [`Backend`]. Two implementations exist:
//! [`Tape`] records every operation so that [`Tape::backward`] can produce
//! gradients, and [`Eval`] evaluates eagerly without keeping intermediates
//! (used for sampling and validation passes).

mod adam;
mod backend;
mod kernels;
mod mlp;
mod tape;
mod tensor;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use backend::Eval;
pub use mlp::{glorot_uniform, Activation, Head, Mlp};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{gemm, GemmOperand};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
}

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat owner of every trainable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, t: Tensor) -> ParamId {
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// A differentiable operation defined outside the built-in primitive set.
///
/// `backward` returns one gradient per input, shaped like that input.
pub trait CustomOp: Send + Sync + std::fmt::Debug {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

/// The primitive set shared by the recording tape and the eager evaluator.
///
/// Shape mismatches are contract violations and panic.
pub trait Backend {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn param(&mut self, id: ParamId) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `a` is `n x m`, `bias` has `m` entries and is added to every row.
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Elementwise product with a fixed tensor (masks).
    fn mul_const(&mut self, a: &Self::V, c: &Arc<Tensor>) -> Self::V;
    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, k: f64) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn exp(&mut self, a: &Self::V) -> Self::V;
    fn log(&mut self, a: &Self::V) -> Self::V;
    fn softplus(&mut self, a: &Self::V) -> Self::V;
    fn square(&mut self, a: &Self::V) -> Self::V;
    /// Row-wise softmax of a 2-D tensor.
    fn softmax(&mut self, a: &Self::V) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;
    /// `n x m -> n`, summing each row.
    fn sum_cols(&mut self, a: &Self::V) -> Self::V;
    fn select_cols(&mut self, a: &Self::V, idx: &[usize]) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Self::V;
    fn custom(&mut self, inputs: &[&Self::V], op: Arc<dyn CustomOp>) -> Self::V;

    fn neg(&mut self, a: &Self::V) -> Self::V {
        self.scale(a, -1.0)
    }

    fn slice_cols(&mut self, a: &Self::V, start: usize, end: usize) -> Self::V {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(a, &idx)
    }
}
