//! Spline layers in coupling (C-RQS) and autoregressive (A-RQS) form.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spline::{SplineConfig, SplineDirection, SplineOp};
use super::{check_width, made_masks, BijectorError, LayerOutput};
use crate::diffcore::{Activation, Backend, Head, Mlp, ParamStore};

/// Applies the fused spline op; returns the mapped columns and the summed
/// log-derivatives.
fn apply_spline<B: Backend>(
    b: &mut B,
    cfg: SplineConfig,
    direction: SplineDirection,
    v: &B::V,
    raw: &B::V,
    m: usize,
) -> (B::V, B::V) {
    let out = b.custom(&[v, raw], Arc::new(SplineOp { cfg, direction }));
    let mapped = b.slice_cols(&out, 0, m);
    let lds = b.slice_cols(&out, m, 2 * m);
    let ld = b.sum_cols(&lds);
    (mapped, ld)
}

/// The last `D - floor(D/2)` columns pass through splines whose parameters
/// are a function of the first `floor(D/2)` columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineCoupling {
    dim: usize,
    split: usize,
    spline: SplineConfig,
    net: Mlp,
}

impl SplineCoupling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: &[usize],
        spline: SplineConfig,
        rng: &mut R,
    ) -> Result<Self, BijectorError> {
        if dim < 2 {
            return Err(BijectorError::Dim(format!("coupling needs D >= 2, got {dim}")));
        }
        let split = dim / 2;
        let out = (dim - split) * spline.raw_len();
        let widths: Vec<usize> = std::iter::once(split)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(out))
            .collect();
        let heads = vec![Head::new(out, Activation::Linear)];
        let net = Mlp::new(store, &widths, Activation::Relu, heads, None, rng)?;
        Ok(Self {
            dim,
            split,
            spline,
            net,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spline(&self) -> SplineConfig {
        self.spline
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn run<B: Backend>(&self, b: &mut B, v: &B::V, direction: SplineDirection) -> LayerOutput<B> {
        check_width(b, v, self.dim)?;
        let va = b.slice_cols(v, 0, self.split);
        let vb = b.slice_cols(v, self.split, self.dim);
        let raw = self.net.forward(b, &va)?.pop().expect("single head");
        let (mapped, ld) = apply_spline(b, self.spline, direction, &vb, &raw, self.dim - self.split);
        Ok((b.concat_cols(&[va, mapped]), ld))
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> LayerOutput<B> {
        self.run(b, x, SplineDirection::Forward)
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, y: &B::V) -> LayerOutput<B> {
        self.run(b, y, SplineDirection::Inverse)
    }
}

/// `y_1 = x_1`; every later column goes through a spline whose parameters
/// depend on the preceding output columns through a masked network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineAutoregressive {
    dim: usize,
    spline: SplineConfig,
    net: Mlp,
    degrees: Vec<Vec<usize>>,
    /// Reorders the network's block-major output (parameter-major) into
    /// one contiguous raw vector per transformed column.
    reorder: Vec<usize>,
}

impl SplineAutoregressive {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: &[usize],
        spline: SplineConfig,
        rng: &mut R,
    ) -> Result<Self, BijectorError> {
        let r = spline.raw_len();
        let made = made_masks(dim, hidden, r, rng)?;
        let m = dim - 1;
        let widths: Vec<usize> = std::iter::once(dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(r * m))
            .collect();
        let heads = vec![Head::new(r * m, Activation::Linear)];
        let net = Mlp::new(store, &widths, Activation::Relu, heads, Some(made.masks), rng)?;
        let reorder = (0..m).flat_map(|j| (0..r).map(move |p| p * m + j)).collect();
        Ok(Self {
            dim,
            spline,
            net,
            degrees: made.degrees,
            reorder,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spline(&self) -> SplineConfig {
        self.spline
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn degrees(&self) -> &[Vec<usize>] {
        &self.degrees
    }

    /// Raw spline parameters, `n x (D-1)(3K-1)`, one block per column `2..=D`.
    pub fn raw_params<B: Backend>(&self, b: &mut B, y: &B::V) -> Result<B::V, BijectorError> {
        let out = self.net.forward(b, y)?.pop().expect("single head");
        Ok(b.select_cols(&out, &self.reorder))
    }

    /// Generative direction, `D - 1` passes as for the affine version.
    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> LayerOutput<B> {
        check_width(b, x, self.dim)?;
        let x1 = b.slice_cols(x, 0, 1);
        let xr = b.slice_cols(x, 1, self.dim);
        let mut y = x.clone();
        let mut ld = None;
        for _ in 1..self.dim {
            let raw = self.raw_params(b, &y)?;
            let (mapped, l) =
                apply_spline(b, self.spline, SplineDirection::Forward, &xr, &raw, self.dim - 1);
            y = b.concat_cols(&[x1.clone(), mapped]);
            ld = Some(l);
        }
        Ok((y, ld.expect("dim >= 2")))
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, y: &B::V) -> LayerOutput<B> {
        check_width(b, y, self.dim)?;
        let raw = self.raw_params(b, y)?;
        let y1 = b.slice_cols(y, 0, 1);
        let yr = b.slice_cols(y, 1, self.dim);
        let (mapped, ld) =
            apply_spline(b, self.spline, SplineDirection::Inverse, &yr, &raw, self.dim - 1);
        Ok((b.concat_cols(&[y1, mapped]), ld))
    }
}
