//! Affine coupling (RealNVP) and masked affine autoregressive (MAF) layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_width, made_masks, BijectorError, LayerOutput};
use crate::diffcore::{Activation, Backend, Head, Mlp, ParamStore};

/// `y_B = x_B * exp(s(x_A)) + t(x_A)` with `x_A` the first `floor(D/2)`
/// columns passed through unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineCoupling {
    dim: usize,
    split: usize,
    net: Mlp,
}

impl AffineCoupling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, BijectorError> {
        if dim < 2 {
            return Err(BijectorError::Dim(format!("coupling needs D >= 2, got {dim}")));
        }
        let split = dim / 2;
        let rest = dim - split;
        let widths: Vec<usize> = std::iter::once(split)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(2 * rest))
            .collect();
        let heads = vec![Head::new(rest, Activation::Tanh), Head::new(rest, Activation::Linear)];
        let net = Mlp::new(store, &widths, Activation::Relu, heads, None, rng)?;
        Ok(Self { dim, split, net })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn scale_shift<B: Backend>(&self, b: &mut B, cond: &B::V) -> Result<(B::V, B::V), BijectorError> {
        let mut heads = self.net.forward(b, cond)?;
        let t = heads.pop().expect("shift head");
        let s = heads.pop().expect("scale head");
        Ok((s, t))
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> LayerOutput<B> {
        check_width(b, x, self.dim)?;
        let xa = b.slice_cols(x, 0, self.split);
        let xb = b.slice_cols(x, self.split, self.dim);
        let (s, t) = self.scale_shift(b, &xa)?;
        let es = b.exp(&s);
        let scaled = b.mul(&xb, &es);
        let yb = b.add(&scaled, &t);
        let y = b.concat_cols(&[xa, yb]);
        let ld = b.sum_cols(&s);
        Ok((y, ld))
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, y: &B::V) -> LayerOutput<B> {
        check_width(b, y, self.dim)?;
        let ya = b.slice_cols(y, 0, self.split);
        let yb = b.slice_cols(y, self.split, self.dim);
        let (s, t) = self.scale_shift(b, &ya)?;
        let shifted = b.sub(&yb, &t);
        let neg_s = b.neg(&s);
        let e = b.exp(&neg_s);
        let xb = b.mul(&shifted, &e);
        let x = b.concat_cols(&[ya, xb]);
        let ld = b.sum_cols(&neg_s);
        Ok((x, ld))
    }
}

/// `y_i = x_i * exp(s_{i-1}(y_{<i})) + t_{i-1}(y_{<i})` for `i >= 2`,
/// `y_1 = x_1`, with `s` and `t` produced by a masked network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskedAffine {
    dim: usize,
    net: Mlp,
    degrees: Vec<Vec<usize>>,
}

impl MaskedAffine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, BijectorError> {
        let made = made_masks(dim, hidden, 2, rng)?;
        let widths: Vec<usize> = std::iter::once(dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(2 * (dim - 1)))
            .collect();
        let heads = vec![
            Head::new(dim - 1, Activation::Tanh),
            Head::new(dim - 1, Activation::Linear),
        ];
        let net = Mlp::new(store, &widths, Activation::Relu, heads, Some(made.masks), rng)?;
        Ok(Self {
            dim,
            net,
            degrees: made.degrees,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn degrees(&self) -> &[Vec<usize>] {
        &self.degrees
    }

    /// Scale and shift for dimensions `2..=D` conditioned on `y`.
    pub fn scale_shift<B: Backend>(
        &self,
        b: &mut B,
        y: &B::V,
    ) -> Result<(B::V, B::V), BijectorError> {
        let mut heads = self.net.forward(b, y)?;
        let t = heads.pop().expect("shift head");
        let s = heads.pop().expect("scale head");
        Ok((s, t))
    }

    /// Generative direction. Each pass fixes one more output column, so
    /// `D - 1` passes reach the fixed point (the first column is exact from
    /// the start).
    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> LayerOutput<B> {
        check_width(b, x, self.dim)?;
        let x1 = b.slice_cols(x, 0, 1);
        let xr = b.slice_cols(x, 1, self.dim);
        let mut y = x.clone();
        let mut s_last = None;
        for _ in 1..self.dim {
            let (s, t) = self.scale_shift(b, &y)?;
            let es = b.exp(&s);
            let scaled = b.mul(&xr, &es);
            let yr = b.add(&scaled, &t);
            y = b.concat_cols(&[x1.clone(), yr]);
            s_last = Some(s);
        }
        let ld = b.sum_cols(&s_last.expect("dim >= 2"));
        Ok((y, ld))
    }

    /// Normalizing direction, one network pass.
    pub fn inverse<B: Backend>(&self, b: &mut B, y: &B::V) -> LayerOutput<B> {
        check_width(b, y, self.dim)?;
        let (s, t) = self.scale_shift(b, y)?;
        let y1 = b.slice_cols(y, 0, 1);
        let yr = b.slice_cols(y, 1, self.dim);
        let shifted = b.sub(&yr, &t);
        let neg_s = b.neg(&s);
        let e = b.exp(&neg_s);
        let xr = b.mul(&shifted, &e);
        let x = b.concat_cols(&[y1, xr]);
        let ld = b.sum_cols(&neg_s);
        Ok((x, ld))
    }
}
