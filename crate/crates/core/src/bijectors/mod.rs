//! Invertible layers with tractable log-Jacobian determinants.
//!
//! Every layer maps `n x D` batches both ways. `forward` is the generative
//! direction (base towards data) and `inverse` the normalizing direction;
//! both return the transformed batch and the per-row `log|det J|` of the map
//! they applied. Layers are written against [`Backend`] so the same code
//! records gradients during training and runs eagerly during sampling.

mod affine;
mod made;
mod permutation;
pub mod spline;
mod spline_layers;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Backend, DiffError, Eval, Mlp, ParamStore, Tensor};

pub use affine::{AffineCoupling, MaskedAffine};
pub use made::{made_masks, MadeMasks};
pub use permutation::Permutation;
pub use spline::{build_params, RqsParams, SplineConfig, SplineDirection, SplineError, SplineOp};
pub use spline_layers::{SplineAutoregressive, SplineCoupling};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BijectorError {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("input has {got} columns, layer expects {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Transformed batch and per-row log-determinant.
pub type LayerOutput<B> = Result<(<B as Backend>::V, <B as Backend>::V), BijectorError>;

pub(crate) fn check_width<B: Backend>(b: &B, v: &B::V, dim: usize) -> Result<(), BijectorError> {
    let shape = b.value(v).shape();
    if shape.len() != 2 || shape[1] != dim {
        return Err(BijectorError::Width {
            expected: dim,
            got: shape.get(1).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// One element of a flow chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    AffineCoupling(AffineCoupling),
    MaskedAffine(MaskedAffine),
    SplineCoupling(SplineCoupling),
    SplineAutoregressive(SplineAutoregressive),
    Permutation(Permutation),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::AffineCoupling(l) => l.dim(),
            Layer::MaskedAffine(l) => l.dim(),
            Layer::SplineCoupling(l) => l.dim(),
            Layer::SplineAutoregressive(l) => l.dim(),
            Layer::Permutation(p) => p.dim(),
        }
    }

    pub fn net(&self) -> Option<&Mlp> {
        match self {
            Layer::AffineCoupling(l) => Some(l.net()),
            Layer::MaskedAffine(l) => Some(l.net()),
            Layer::SplineCoupling(l) => Some(l.net()),
            Layer::SplineAutoregressive(l) => Some(l.net()),
            Layer::Permutation(_) => None,
        }
    }

    /// Zeroes the conditioner's output layer, which makes every layer type
    /// the identity map.
    pub fn set_identity(&self, store: &mut ParamStore) {
        if let Some(net) = self.net() {
            net.zero_output_layer(store);
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> LayerOutput<B> {
        match self {
            Layer::AffineCoupling(l) => l.forward(b, x),
            Layer::MaskedAffine(l) => l.forward(b, x),
            Layer::SplineCoupling(l) => l.forward(b, x),
            Layer::SplineAutoregressive(l) => l.forward(b, x),
            Layer::Permutation(p) => p.forward(b, x),
        }
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, y: &B::V) -> LayerOutput<B> {
        match self {
            Layer::AffineCoupling(l) => l.inverse(b, y),
            Layer::MaskedAffine(l) => l.inverse(b, y),
            Layer::SplineCoupling(l) => l.inverse(b, y),
            Layer::SplineAutoregressive(l) => l.inverse(b, y),
            Layer::Permutation(p) => p.inverse(b, y),
        }
    }

    /// Eager generative map of a concrete batch.
    pub fn forward_tensor(
        &self,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<(Tensor, Tensor), BijectorError> {
        let mut b = Eval::new(store);
        self.forward(&mut b, x)
    }

    /// Eager normalizing map of a concrete batch.
    pub fn inverse_tensor(
        &self,
        store: &ParamStore,
        y: &Tensor,
    ) -> Result<(Tensor, Tensor), BijectorError> {
        let mut b = Eval::new(store);
        self.inverse(&mut b, y)
    }
}

/// Which transform a [`Layer::new_of_kind`] call builds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    AffineCoupling,
    MaskedAffine,
    SplineCoupling(SplineConfig),
    SplineAutoregressive(SplineConfig),
}

impl Layer {
    pub fn new_of_kind<R: Rng + ?Sized>(
        kind: LayerKind,
        store: &mut ParamStore,
        dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, BijectorError> {
        Ok(match kind {
            LayerKind::AffineCoupling => {
                Layer::AffineCoupling(AffineCoupling::new(store, dim, hidden, rng)?)
            }
            LayerKind::MaskedAffine => Layer::MaskedAffine(MaskedAffine::new(store, dim, hidden, rng)?),
            LayerKind::SplineCoupling(c) => {
                Layer::SplineCoupling(SplineCoupling::new(store, dim, hidden, c, rng)?)
            }
            LayerKind::SplineAutoregressive(c) => {
                Layer::SplineAutoregressive(SplineAutoregressive::new(store, dim, hidden, c, rng)?)
            }
        })
    }
}
