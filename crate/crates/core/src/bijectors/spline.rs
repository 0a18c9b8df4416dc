//! Monotonic rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! A spline with `K` bins is parameterized by an unconstrained vector of
//! length `3K - 1`: `K` width logits, `K` height logits and `K - 1` internal
//! derivative pre-activations. Widths and heights go through a softmax
//! (floored at `MIN_BIN_FRACTION * 2B / K`) and are accumulated from `-B`;
//! internal derivatives go through an offset softplus floored at
//! `MIN_DERIVATIVE`. The boundary derivatives are fixed to 1 so the spline
//! joins the identity tails with matching slope.
//!
//! The offset is chosen so an all-zero raw vector gives uniform bins with
//! unit derivatives, i.e. the identity map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{CustomOp, Tensor};

pub const MIN_BIN_FRACTION: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// `ln(e - 1)`, so that `softplus(DERIVATIVE_OFFSET) = 1`.
pub const DERIVATIVE_OFFSET: f64 = 0.541_324_854_612_918;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("raw parameter vector has length {got}, expected {expected}")]
    RawLength { expected: usize, got: usize },
    #[error("spline needs at least one bin and a positive bound")]
    Config,
    #[error("negative discriminant {0} while inverting a spline bin")]
    NegativeDiscriminant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub bins: usize,
    pub bound: f64,
}

impl SplineConfig {
    pub fn new(bins: usize, bound: f64) -> Result<Self, SplineError> {
        if bins == 0 || !(bound > 0.0) || !bound.is_finite() {
            return Err(SplineError::Config);
        }
        Ok(Self { bins, bound })
    }

    /// Length of the unconstrained parameter vector, `3K - 1`.
    pub fn raw_len(&self) -> usize {
        3 * self.bins - 1
    }
}

/// Constrained knots and derivatives of one spline.
#[derive(Debug, Clone, PartialEq)]
pub struct RqsParams {
    pub bound: f64,
    /// `K + 1` abscissae from `-B` to `B`.
    pub xs: Vec<f64>,
    /// `K + 1` ordinates from `-B` to `B`.
    pub ys: Vec<f64>,
    /// `K + 1` derivatives; the first and last are 1.
    pub derivs: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Knot positions from bin logits. Returns `(softmax, knots)`.
fn knots_from_logits(logits: &[f64], bound: f64) -> (Vec<f64>, Vec<f64>) {
    let k = logits.len();
    let sm = softmax(logits);
    let floor = MIN_BIN_FRACTION / k as f64;
    let scale = 1.0 - MIN_BIN_FRACTION;
    let mut knots = Vec::with_capacity(k + 1);
    knots.push(-bound);
    let mut acc = 0.0;
    for s in sm.iter().take(k - 1) {
        acc += floor + scale * s;
        knots.push(-bound + 2.0 * bound * acc);
    }
    knots.push(bound);
    (sm, knots)
}

fn derivative_from_raw(z: f64) -> f64 {
    MIN_DERIVATIVE + (1.0 - MIN_DERIVATIVE) * softplus(z + DERIVATIVE_OFFSET)
}

/// Builds a spline from its `3K - 1` unconstrained parameters.
pub fn build_params(raw: &[f64], cfg: SplineConfig) -> Result<RqsParams, SplineError> {
    let k = cfg.bins;
    if raw.len() != cfg.raw_len() {
        return Err(SplineError::RawLength {
            expected: cfg.raw_len(),
            got: raw.len(),
        });
    }
    let (_, xs) = knots_from_logits(&raw[..k], cfg.bound);
    let (_, ys) = knots_from_logits(&raw[k..2 * k], cfg.bound);
    let mut derivs = Vec::with_capacity(k + 1);
    derivs.push(1.0);
    derivs.extend(raw[2 * k..].iter().map(|&z| derivative_from_raw(z)));
    derivs.push(1.0);
    Ok(RqsParams {
        bound: cfg.bound,
        xs,
        ys,
        derivs,
    })
}

/// One bin's knots and end-point derivatives.
#[derive(Debug, Clone, Copy)]
struct Bin {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    d0: f64,
    d1: f64,
}

/// Index of the bin containing `v`, or `None` outside `[knots[0], knots[K]]`.
/// Linear scan: `K` is small.
fn locate(knots: &[f64], v: f64) -> Option<usize> {
    let last = knots.len() - 1;
    if !(v >= knots[0] && v <= knots[last]) {
        return None;
    }
    let mut k = 0;
    while k + 1 < last && v >= knots[k + 1] {
        k += 1;
    }
    Some(k)
}

impl RqsParams {
    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    fn bin(&self, k: usize) -> Bin {
        Bin {
            x0: self.xs[k],
            x1: self.xs[k + 1],
            y0: self.ys[k],
            y1: self.ys[k + 1],
            d0: self.derivs[k],
            d1: self.derivs[k + 1],
        }
    }

    /// `(y, log dy/dx)`; identity outside `[-B, B]`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        match locate(&self.xs, x) {
            None => (x, 0.0),
            Some(k) => bin_forward(&self.bin(k), x),
        }
    }

    /// `(x, log dx/dy)`; identity outside `[-B, B]`.
    pub fn inverse(&self, y: f64) -> Result<(f64, f64), SplineError> {
        match locate(&self.ys, y) {
            None => Ok((y, 0.0)),
            Some(k) => {
                let b = self.bin(k);
                let x = bin_inverse(&b, y)?;
                let (_, ld) = bin_forward(&b, x);
                Ok((x, -ld))
            }
        }
    }

    /// `dy/dx` at `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        self.forward(x).1.exp()
    }
}

fn bin_forward(b: &Bin, x: f64) -> (f64, f64) {
    let h = b.x1 - b.x0;
    let hh = b.y1 - b.y0;
    let s = hh / h;
    let theta = (x - b.x0) / h;
    let t = theta * (1.0 - theta);
    let den = s + (b.d1 + b.d0 - 2.0 * s) * t;
    let num = hh * (s * theta * theta + b.d0 * t);
    let y = b.y0 + num / den;
    let omt = 1.0 - theta;
    let dnum = b.d1 * theta * theta + 2.0 * s * t + b.d0 * omt * omt;
    let ld = 2.0 * s.ln() + dnum.ln() - 2.0 * den.ln();
    (y, ld)
}

/// Root in `[0, 1]` of the quadratic that inverts one bin.
fn bin_inverse(b: &Bin, y: f64) -> Result<f64, SplineError> {
    let h = b.x1 - b.x0;
    let hh = b.y1 - b.y0;
    let s = hh / h;
    let xi = y - b.y0;
    let sum = b.d1 + b.d0 - 2.0 * s;
    let qa = hh * (s - b.d0) + xi * sum;
    let qb = hh * b.d0 - xi * sum;
    let qc = -s * xi;
    let mut disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        // Rounding can push an exact double root slightly negative.
        if disc > -1e-12 * (qb * qb + (4.0 * qa * qc).abs()) {
            disc = 0.0;
        } else {
            return Err(SplineError::NegativeDiscriminant(disc));
        }
    }
    let denom = -qb - disc.sqrt();
    let theta = if denom == 0.0 { 0.0 } else { 2.0 * qc / denom };
    Ok(b.x0 + theta.clamp(0.0, 1.0) * h)
}

/// Vector-Jacobian product of `(y, ld) = bin_forward(b, x)` with upstream
/// `(uy, ul)`. Returns gradients for `[x, x0, x1, y0, y1, d0, d1]`.
fn bin_vjp(b: &Bin, x: f64, uy: f64, ul: f64) -> [f64; 7] {
    let h = b.x1 - b.x0;
    let hh = b.y1 - b.y0;
    let s = hh / h;
    let theta = (x - b.x0) / h;
    let omt = 1.0 - theta;
    let t = theta * omt;
    let sum = b.d1 + b.d0 - 2.0 * s;
    let den = s + sum * t;
    let inner = s * theta * theta + b.d0 * t;
    let num = hh * inner;
    let dnum = b.d1 * theta * theta + 2.0 * s * t + b.d0 * omt * omt;

    let (mut g_s, mut g_t, mut g_theta) = (0.0, 0.0, 0.0);
    let (mut g_d0, mut g_d1, mut g_hh) = (0.0, 0.0, 0.0);

    // y = y0 + num / den
    let g_y0_direct = uy;
    let g_num = uy / den;
    let mut g_den = -uy * num / (den * den);

    // ld = 2 ln s + ln dnum - 2 ln den
    g_s += 2.0 * ul / s;
    let g_dnum = ul / dnum;
    g_den += -2.0 * ul / den;

    // dnum = d1 θ² + 2 s t + d0 (1-θ)²
    g_d1 += g_dnum * theta * theta;
    g_theta += g_dnum * (2.0 * b.d1 * theta - 2.0 * b.d0 * omt);
    g_s += g_dnum * 2.0 * t;
    g_t += g_dnum * 2.0 * s;
    g_d0 += g_dnum * omt * omt;

    // den = s + (d1 + d0 - 2s) t
    g_s += g_den * (1.0 - 2.0 * t);
    g_d1 += g_den * t;
    g_d0 += g_den * t;
    g_t += g_den * sum;

    // num = hh (s θ² + d0 t)
    g_hh += g_num * inner;
    g_s += g_num * hh * theta * theta;
    g_theta += g_num * hh * 2.0 * s * theta;
    g_d0 += g_num * hh * t;
    g_t += g_num * hh * b.d0;

    // t = θ(1-θ)
    g_theta += g_t * (1.0 - 2.0 * theta);

    // θ = (x - x0) / h ; s = hh / h
    let g_x = g_theta / h;
    let mut g_x0 = -g_theta / h;
    let mut g_h = -g_theta * theta / h;
    g_hh += g_s / h;
    g_h += -g_s * s / h;

    // hh = y1 - y0 ; h = x1 - x0
    let g_y1 = g_hh;
    let g_y0 = g_y0_direct - g_hh;
    let g_x1 = g_h;
    g_x0 -= g_h;

    [g_x, g_x0, g_x1, g_y0, g_y1, g_d0, g_d1]
}

/// Pushes knot gradients back to the logits that produced them.
fn knots_vjp(softmax: &[f64], bound: f64, g_knots: &[f64], g_logits: &mut [f64]) {
    let k = softmax.len();
    // knots[j] = -B + 2B Σ_{i<j} wf_i for 0 < j < K; the ends are constant.
    let mut g_wf = vec![0.0; k];
    let mut suffix = 0.0;
    for j in (1..k).rev() {
        suffix += g_knots[j];
        g_wf[j - 1] = 2.0 * bound * suffix;
    }
    let scale = 1.0 - MIN_BIN_FRACTION;
    let dot: f64 = softmax.iter().zip(&g_wf).map(|(s, g)| s * g * scale).sum();
    for i in 0..k {
        g_logits[i] += softmax[i] * (scale * g_wf[i] - dot);
    }
}

/// Gradients with respect to the raw vector given local bin gradients.
fn raw_vjp(raw: &[f64], cfg: SplineConfig, k: usize, local: &[f64; 7], g_raw: &mut [f64]) {
    let bins = cfg.bins;
    let [_, g_x0, g_x1, g_y0, g_y1, g_d0, g_d1] = *local;
    let mut gx = vec![0.0; bins + 1];
    let mut gy = vec![0.0; bins + 1];
    gx[k] += g_x0;
    gx[k + 1] += g_x1;
    gy[k] += g_y0;
    gy[k + 1] += g_y1;
    let sw = softmax(&raw[..bins]);
    let sh = softmax(&raw[bins..2 * bins]);
    let (gw, rest) = g_raw.split_at_mut(bins);
    let (gh, gd) = rest.split_at_mut(bins);
    knots_vjp(&sw, cfg.bound, &gx, gw);
    knots_vjp(&sh, cfg.bound, &gy, gh);
    // Internal derivative j (1..K-1) comes from raw[2K + j - 1].
    for (j, g) in [(k, g_d0), (k + 1, g_d1)] {
        if j >= 1 && j < bins {
            let z = raw[2 * bins + j - 1];
            gd[j - 1] += g * (1.0 - MIN_DERIVATIVE) * sigmoid(z + DERIVATIVE_OFFSET);
        }
    }
}

/// Which way a spline op maps its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplineDirection {
    /// Knot abscissae to ordinates (generative).
    Forward,
    /// Ordinates back to abscissae (normalizing).
    Inverse,
}

/// Gradients of one spline evaluation with respect to its input and raw
/// parameters, given upstream `(u_out, u_ld)`.
///
/// For the inverse direction `out` is the computed pre-image.
pub fn spline_vjp(
    raw: &[f64],
    cfg: SplineConfig,
    direction: SplineDirection,
    input: f64,
    out: f64,
    u_out: f64,
    u_ld: f64,
    g_raw: &mut [f64],
) -> f64 {
    let p = build_params(raw, cfg).expect("raw length checked by caller");
    match direction {
        SplineDirection::Forward => match locate(&p.xs, input) {
            None => u_out,
            Some(k) => {
                let local = bin_vjp(&p.bin(k), input, u_out, u_ld);
                raw_vjp(raw, cfg, k, &local, g_raw);
                local[0]
            }
        },
        SplineDirection::Inverse => match locate(&p.ys, input) {
            None => u_out,
            Some(k) => {
                let b = p.bin(k);
                let x = out;
                // d ld / dx at the pre-image, and f'(x).
                let ld_x = bin_vjp(&b, x, 0.0, 1.0)[0];
                let fprime = bin_forward(&b, x).1.exp();
                // out = x(input, p), ld_out = -ld(x, p).
                let g_xtot = u_out - u_ld * ld_x;
                let g_in = g_xtot / fprime;
                let local = bin_vjp(&b, x, -g_in, -u_ld);
                raw_vjp(raw, cfg, k, &local, g_raw);
                g_in
            }
        },
    }
}

/// Fused batched spline: inputs `x: n x m` and `raw: n x m(3K-1)` (one
/// contiguous raw block per column), output `n x 2m` holding the mapped
/// values followed by the per-column log-derivatives.
#[derive(Debug, Clone, Copy)]
pub struct SplineOp {
    pub cfg: SplineConfig,
    pub direction: SplineDirection,
}

impl SplineOp {
    fn dims(&self, x: &Tensor, raw: &Tensor) -> (usize, usize, usize) {
        let (n, m) = (x.rows(), x.cols());
        let r = self.cfg.raw_len();
        assert_eq!(raw.rows(), n, "spline raw rows");
        assert_eq!(raw.cols(), m * r, "spline raw width");
        (n, m, r)
    }
}

impl CustomOp for SplineOp {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, raw) = (inputs[0], inputs[1]);
        let (n, m, r) = self.dims(x, raw);
        let mut out = vec![0.0; n * 2 * m];
        for i in 0..n {
            let rrow = raw.row(i);
            for j in 0..m {
                let p = build_params(&rrow[j * r..(j + 1) * r], self.cfg)
                    .expect("raw length checked");
                let v = x.at(i, j);
                let (o, ld) = match self.direction {
                    SplineDirection::Forward => p.forward(v),
                    // A failed inversion surfaces as NaN for the caller's
                    // non-finite checks.
                    SplineDirection::Inverse => p.inverse(v).unwrap_or((f64::NAN, f64::NAN)),
                };
                out[i * 2 * m + j] = o;
                out[i * 2 * m + m + j] = ld;
            }
        }
        Tensor::matrix(n, 2 * m, out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let (x, raw) = (inputs[0], inputs[1]);
        let (n, m, r) = self.dims(x, raw);
        let mut gx = vec![0.0; n * m];
        let mut graw = vec![0.0; n * m * r];
        for i in 0..n {
            let rrow = raw.row(i);
            for j in 0..m {
                let u_out = grad_out.at(i, j);
                let u_ld = grad_out.at(i, m + j);
                if u_out == 0.0 && u_ld == 0.0 {
                    continue;
                }
                let off = i * m * r + j * r;
                gx[i * m + j] = spline_vjp(
                    &rrow[j * r..(j + 1) * r],
                    self.cfg,
                    self.direction,
                    x.at(i, j),
                    output.at(i, j),
                    u_out,
                    u_ld,
                    &mut graw[off..off + r],
                );
            }
        }
        vec![Tensor::matrix(n, m, gx), Tensor::matrix(n, m * r, graw)]
    }
}
