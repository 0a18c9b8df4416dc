//! Correlated mixture-of-Gaussians targets and the standard-normal base.
//!
//! A target is a categorical mixture of diagonal-covariance Gaussians. All
//! dimensions of one component share its mixture weight, so mixing alone
//! induces the cross-dimension correlations.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::seeds::{self, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error("sample width {got} does not match target dimension {expected}")]
    Width { expected: usize, got: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Full parameterization of a correlated mixture of Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmogSpec {
    pub dim: usize,
    pub n_components: usize,
    /// `n_components x dim`
    pub means: Vec<Vec<f64>>,
    /// `n_components x dim`, strictly positive
    pub stds: Vec<Vec<f64>>,
    pub mixture_probs: Vec<f64>,
    pub seed: u64,
}

impl CmogSpec {
    pub fn new(
        means: Vec<Vec<f64>>,
        stds: Vec<Vec<f64>>,
        mixture_probs: Vec<f64>,
        seed: u64,
    ) -> Result<Self, TargetError> {
        let n = mixture_probs.len();
        let dim = means.first().map_or(0, Vec::len);
        let spec = Self {
            dim,
            n_components: n,
            means,
            stds,
            mixture_probs,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        let bad = |m: String| Err(TargetError::Invalid(m));
        if self.dim == 0 || self.n_components == 0 {
            return bad("dimension and component count must be positive".into());
        }
        if self.means.len() != self.n_components
            || self.stds.len() != self.n_components
            || self.mixture_probs.len() != self.n_components
        {
            return bad("component count does not match parameter shapes".into());
        }
        for k in 0..self.n_components {
            if self.means[k].len() != self.dim || self.stds[k].len() != self.dim {
                return bad(format!("component {k} has the wrong width"));
            }
            if self.stds[k].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return bad(format!("component {k} has a non-positive std"));
            }
            if self.means[k].iter().any(|m| !m.is_finite()) {
                return bad(format!("component {k} has a non-finite mean"));
            }
        }
        if self.mixture_probs.iter().any(|&p| !(p >= 0.0)) {
            return bad("mixture probabilities must be nonnegative".into());
        }
        let total: f64 = self.mixture_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("mixture probabilities sum to {total}"));
        }
        Ok(())
    }

    /// Mixture mean `Σ_k π_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (p, mu) in self.mixture_probs.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += p * m;
            }
        }
        out
    }

    /// Mixture covariance `Σ_k π_k (Σ_k + μ_k μ_kᵀ) − μ μᵀ`.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mu = self.mean();
        let mut cov = vec![vec![0.0; d]; d];
        for k in 0..self.n_components {
            let p = self.mixture_probs[k];
            for i in 0..d {
                for j in 0..d {
                    let mut second = self.means[k][i] * self.means[k][j];
                    if i == j {
                        second += self.stds[k][i] * self.stds[k][i];
                    }
                    cov[i][j] += p * second;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= mu[i] * mu[j];
            }
        }
        cov
    }

    pub fn save(&self, path: &Path) -> Result<(), TargetError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| TargetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TargetError> {
        let text = std::fs::read_to_string(path).map_err(|source| TargetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws a random target: means uniform on `[0, 10]`, stds uniform on
/// `(0, 1]`, mixture weights uniform draws normalized by their sum.
pub fn make_cmog(dim: usize, n_components: usize, seed: u64) -> Result<CmogSpec, TargetError> {
    if dim == 0 || n_components == 0 {
        return Err(TargetError::Invalid(
            "dimension and component count must be positive".into(),
        ));
    }
    let mut rng = seeds::rng(seed);
    let means = (0..n_components)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..=10.0)).collect())
        .collect();
    let stds = (0..n_components)
        .map(|_| {
            (0..dim)
                .map(|_| 1.0 - rng.random::<f64>())
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..n_components)
        .map(|_| 1.0 - rng.random::<f64>())
        .collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
    // Push the rounding residue into the largest weight.
    let residue = 1.0 - probs.iter().sum::<f64>();
    let (imax, _) = probs
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
    probs[imax] += residue;
    CmogSpec::new(means, stds, probs, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Target,
    Flow,
    Base,
}

/// `N x D` points plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub data: Tensor,
    pub source: SampleSource,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// CSV with a `x1..xD` header row and one point per line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TargetError> {
        write_points_csv(&self.data, out)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TargetError> {
        let f = std::fs::File::create(path).map_err(|source| TargetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn write_points_csv<W: Write>(points: &Tensor, out: W) -> Result<(), TargetError> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=points.cols()).map(|i| format!("x{i}")).collect();
    w.write_record(&header)?;
    for r in 0..points.rows() {
        w.write_record(points.row(r).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|source| TargetError::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Tensor, TargetError> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| TargetError::Invalid(format!("bad number {field:?} in {}", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, width], data).map_err(|e| TargetError::Invalid(e.to_string()))
}

fn pick_component(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        cum += p;
        if u < cum && p > 0.0 {
            return k;
        }
    }
    last_positive
}

pub(crate) fn fill_cmog(spec: &CmogSpec, n: usize, rng: &mut Rng) -> Tensor {
    let d = spec.dim;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let k = pick_component(&spec.mixture_probs, rng.random::<f64>());
        let (mu, sd) = (&spec.means[k], &spec.stds[k]);
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu[i] + sd[i] * z);
        }
    }
    Tensor::matrix(n, d, data)
}

/// Draws `n` points: a component from the categorical weights, then `D`
/// independent normals with that component's means and stds.
pub fn sample_cmog(spec: &CmogSpec, n: usize, seed: u64) -> SampleBatch {
    assert!(n >= 1, "sample size must be positive");
    let mut rng = seeds::rng(seed);
    SampleBatch {
        data: fill_cmog(spec, n, &mut rng),
        source: SampleSource::Target,
        seed,
    }
}

/// Exact per-point log-density, via log-sum-exp over components.
pub fn log_prob_cmog(spec: &CmogSpec, x: &Tensor) -> Result<Tensor, TargetError> {
    if x.cols() != spec.dim {
        return Err(TargetError::Width {
            expected: spec.dim,
            got: x.cols(),
        });
    }
    let log_weights: Vec<f64> = spec.mixture_probs.iter().map(|p| p.ln()).collect();
    let log_norms: Vec<f64> = spec
        .stds
        .iter()
        .map(|sd| sd.iter().map(|s| -s.ln() - 0.5 * LN_2PI).sum())
        .collect();
    let mut terms = vec![0.0; spec.n_components];
    let out = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            for (k, t) in terms.iter_mut().enumerate() {
                let (mu, sd) = (&spec.means[k], &spec.stds[k]);
                let quad: f64 = row
                    .iter()
                    .zip(mu.iter().zip(sd))
                    .map(|(&v, (&m, &s))| {
                        let z = (v - m) / s;
                        z * z
                    })
                    .sum();
                *t = log_weights[k] + log_norms[k] - 0.5 * quad;
            }
            log_sum_exp(&terms)
        })
        .collect();
    Ok(Tensor::vector(out))
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `n` i.i.d. standard-normal points in `dim` dimensions.
pub fn sample_base(dim: usize, n: usize, seed: u64) -> SampleBatch {
    let mut rng = seeds::rng(seed);
    SampleBatch {
        data: fill_base(dim, n, &mut rng),
        source: SampleSource::Base,
        seed,
    }
}

pub(crate) fn fill_base(dim: usize, n: usize, rng: &mut Rng) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(n, dim, data)
}

/// `−(D/2) log 2π − ‖x‖²/2` per row.
pub fn log_prob_base(x: &Tensor) -> Tensor {
    let d = x.cols() as f64;
    Tensor::vector(
        (0..x.rows())
            .map(|r| {
                let sq: f64 = x.row(r).iter().map(|v| v * v).sum();
                -0.5 * d * LN_2PI - 0.5 * sq
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize) -> CmogSpec {
        CmogSpec::new(vec![vec![0.0; dim]], vec![vec![1.0; dim]], vec![1.0], 0).unwrap()
    }

    #[test]
    fn make_cmog_shapes_and_ranges() {
        let s = make_cmog(4, 3, 11).unwrap();
        assert_eq!((s.means.len(), s.means[0].len()), (3, 4));
        assert_eq!((s.stds.len(), s.stds[0].len()), (3, 4));
        assert_eq!(s.mixture_probs.len(), 3);
        for k in 0..3 {
            assert!(s.means[k].iter().all(|m| (0.0..=10.0).contains(m)));
            assert!(s.stds[k].iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
        assert!((s.mixture_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn make_cmog_degenerate_and_deterministic() {
        let s = make_cmog(1, 1, 99).unwrap();
        assert_eq!(s.mixture_probs, vec![1.0]);
        assert_eq!(make_cmog(5, 3, 4).unwrap(), make_cmog(5, 3, 4).unwrap());
        assert_ne!(make_cmog(5, 3, 4).unwrap(), make_cmog(5, 3, 5).unwrap());
        assert!(make_cmog(0, 3, 1).is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(CmogSpec::new(vec![vec![0.0]], vec![vec![0.0]], vec![1.0], 0).is_err());
        assert!(CmogSpec::new(vec![vec![0.0]], vec![vec![1.0]], vec![0.9], 0).is_err());
        assert!(CmogSpec::new(
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
            vec![1.5, -0.5],
            0
        )
        .is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let n = 40_000;
        let b = sample_cmog(&unit(1), n, 5);
        let mean = b.data.sum() / n as f64;
        let var = b.data.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let tol = 5.0 / (n as f64).sqrt();
        assert!(mean.abs() < tol, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < tol, "std {}", var.sqrt());
    }

    #[test]
    fn degenerate_categorical() {
        let spec = CmogSpec::new(
            vec![vec![-50.0], vec![0.0], vec![50.0]],
            vec![vec![1.0]; 3],
            vec![1.0, 0.0, 0.0],
            0,
        )
        .unwrap();
        let b = sample_cmog(&spec, 2000, 3);
        assert!(b.data.data().iter().all(|&v| v < -30.0));
    }

    #[test]
    fn two_mode_counting() {
        let spec = CmogSpec::new(
            vec![vec![0.0], vec![10.0]],
            vec![vec![1.0], vec![1.0]],
            vec![0.5, 0.5],
            0,
        )
        .unwrap();
        let b = sample_cmog(&spec, 10_000, 17);
        let low = b.data.data().iter().filter(|&&v| v < 5.0).count() as f64 / 10_000.0;
        assert!((low - 0.5).abs() <= 0.02, "fraction {low}");
    }

    #[test]
    fn log_prob_closed_forms() {
        let lp = log_prob_cmog(&unit(1), &Tensor::matrix(1, 1, vec![0.0])).unwrap();
        assert!((lp.item() + 0.918_938_533_204_672_7).abs() < 1e-14);

        let s = 0.37;
        let spec = CmogSpec::new(vec![vec![4.2]], vec![vec![s]], vec![1.0], 0).unwrap();
        let lp = log_prob_cmog(&spec, &Tensor::matrix(1, 1, vec![4.2])).unwrap();
        let expected = -(s * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn log_prob_matches_naive_summation() {
        let spec = CmogSpec::new(
            vec![vec![0.5, 1.0], vec![2.0, -1.0]],
            vec![vec![0.8, 1.2], vec![0.6, 0.9]],
            vec![0.3, 0.7],
            0,
        )
        .unwrap();
        let pt = [1.1, -0.2];
        let mut naive = 0.0;
        for k in 0..2 {
            let mut dens = spec.mixture_probs[k];
            for i in 0..2 {
                let (m, s) = (spec.means[k][i], spec.stds[k][i]);
                let z = (pt[i] - m) / s;
                dens *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            naive += dens;
        }
        let lp = log_prob_cmog(&spec, &Tensor::matrix(1, 2, pt.to_vec())).unwrap();
        assert!((lp.item() - naive.ln()).abs() < 1e-13);
    }

    #[test]
    fn log_prob_width_checked() {
        assert!(log_prob_cmog(&unit(2), &Tensor::matrix(1, 3, vec![0.0; 3])).is_err());
    }

    #[test]
    fn base_density_and_cross_check() {
        let lp = log_prob_base(&Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert!((lp.item() + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

        let x = sample_base(3, 50, 8).data;
        let a = log_prob_base(&x);
        let b = log_prob_cmog(&unit(3), &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn base_variance() {
        let n = 20_000;
        let x = sample_base(2, n, 21).data;
        for c in 0..2 {
            let col: Vec<f64> = (0..n).map(|r| x.at(r, c)).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            assert!((v - 1.0).abs() < 5.0 / (n as f64).sqrt(), "var {v}");
        }
    }

    #[test]
    fn normalizes_in_one_dimension() {
        let spec = CmogSpec::new(
            vec![vec![0.5], vec![6.0], vec![9.5]],
            vec![vec![0.4], vec![1.0], vec![0.2]],
            vec![0.2, 0.5, 0.3],
            0,
        )
        .unwrap();
        // Composite Simpson on [-10, 20].
        let (a, b, m) = (-10.0, 20.0, 60_000);
        let h = (b - a) / m as f64;
        let xs: Vec<f64> = (0..=m).map(|i| a + i as f64 * h).collect();
        let lp = log_prob_cmog(&spec, &Tensor::matrix(xs.len(), 1, xs.clone())).unwrap();
        let mut total = 0.0;
        for (i, v) in lp.data().iter().enumerate() {
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            total += w * v.exp();
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let b = sample_base(3, 4, 1);
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x1,x2,x3"));
        assert_eq!(lines.count(), 4);
    }
}
