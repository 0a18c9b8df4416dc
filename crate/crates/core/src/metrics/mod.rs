//! Two-sample test statistics, each scaled by `sqrt(m n / (m + n))`
//! (`sqrt(N/2)` for equal sizes):
//!
//! * `KS`: Kolmogorov-Smirnov distance averaged over the `D` marginals,
//! * `SWD`: 1-D Wasserstein distance averaged over `2D` random projections,
//! * `FN`: Frobenius norm of the difference of the two `D x D` Pearson
//!   correlation matrices, divided by `D`.
//!
//! Empirical CDFs are right-continuous, `F(x) = #{v <= x} / n`, and both
//! one-dimensional distances are computed exactly from sorted samples.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::seeds::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty sample")]
    Empty,
    #[error("samples have {left} and {right} columns")]
    Width { left: usize, right: usize },
    #[error("column {column} has zero variance; its correlation is undefined")]
    ZeroVariance { column: usize },
    #[error("correlations need at least 2 points per sample")]
    TooFewPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Statistic {
    #[serde(rename = "KS")]
    Ks,
    #[serde(rename = "SWD")]
    Swd,
    #[serde(rename = "FN")]
    Fn,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::Ks, Statistic::Swd, Statistic::Fn];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Ks => "KS",
            Statistic::Swd => "SWD",
            Statistic::Fn => "FN",
        }
    }
}

impl std::fmt::Display for Statistic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Statistic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ks" => Ok(Statistic::Ks),
            "swd" => Ok(Statistic::Swd),
            "fn" => Ok(Statistic::Fn),
            _ => Err(format!("unknown statistic {s:?} (expected KS, SWD or FN)")),
        }
    }
}

/// One statistic: its raw value and the size-scaled test statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatValue {
    pub statistic: Statistic,
    pub raw: f64,
    pub scaled: f64,
    pub m: usize,
    pub n: usize,
}

impl StatValue {
    fn new(statistic: Statistic, raw: f64, m: usize, n: usize) -> Self {
        Self {
            statistic,
            raw,
            scaled: scale_factor(m, n) * raw,
            m,
            n,
        }
    }
}

/// `sqrt(m n / (m + n))`, which is `sqrt(N/2)` when `m = n = N`.
pub fn scale_factor(m: usize, n: usize) -> f64 {
    let (m, n) = (m as f64, n as f64);
    (m * n / (m + n)).sqrt()
}

/// Sorted copy of `v` (total order, so NaNs sort last).
pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    s
}

/// Sorted columns of an `N x D` batch.
pub fn sorted_columns(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (t.rows(), t.cols());
    (0..d)
        .map(|j| {
            let mut col: Vec<f64> = (0..n).map(|i| t.data()[i * d + j]).collect();
            col.sort_unstable_by(f64::total_cmp);
            col
        })
        .collect()
}

/// `sup_x |F_a(x) - F_b(x)|` for sorted samples, by walking the merged
/// breakpoints.
pub fn ks_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    debug_assert!(a.is_sorted() && b.is_sorted());
    let (m, n) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / m - j as f64 / n).abs());
    }
    // Once one sample is exhausted its CDF is 1 and the other's only grows.
    best = best.max((i as f64 / m - j as f64 / n).abs());
    Ok(best)
}

/// `integral |F_a - F_b| dx` for sorted samples, exactly, as a sum over the
/// intervals between merged breakpoints.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    debug_assert!(a.is_sorted() && b.is_sorted());
    let (m, n) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / m - j as f64 / n).abs() * (x - prev);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        prev = x;
    }
    Ok(total)
}

fn check_pair(y: &Tensor, z: &Tensor) -> Result<(), MetricError> {
    if y.rows() == 0 || z.rows() == 0 {
        return Err(MetricError::Empty);
    }
    if y.cols() != z.cols() {
        return Err(MetricError::Width {
            left: y.cols(),
            right: z.cols(),
        });
    }
    Ok(())
}

/// Mean of the marginal KS distances.
pub fn ks_mean(y: &Tensor, z: &Tensor) -> Result<StatValue, MetricError> {
    check_pair(y, z)?;
    let (ys, zs) = (sorted_columns(y), sorted_columns(z));
    let mut total = 0.0;
    for (a, b) in ys.iter().zip(&zs) {
        total += ks_1d(a, b)?;
    }
    Ok(StatValue::new(Statistic::Ks, total / y.cols() as f64, y.rows(), z.rows()))
}

/// `2D` unit vectors in `D` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub dim: usize,
    pub seed: u64,
    pub directions: Vec<Vec<f64>>,
}

/// `2D` i.i.d. standard-normal vectors normalized to unit length.
pub fn sample_directions(dim: usize, seed: u64) -> DirectionSet {
    assert!(dim >= 1, "directions need a positive dimension");
    let mut r = rng(seed);
    let directions = (0..2 * dim)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    DirectionSet {
        dim,
        seed,
        directions,
    }
}

fn project(t: &Tensor, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..t.rows())
        .map(|i| t.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect();
    p.sort_unstable_by(f64::total_cmp);
    p
}

/// Sliced Wasserstein distance: 1-D Wasserstein distance of the projected
/// samples, averaged over the directions.
pub fn swd(y: &Tensor, z: &Tensor, dirs: &DirectionSet) -> Result<StatValue, MetricError> {
    check_pair(y, z)?;
    if dirs.dim != y.cols() {
        return Err(MetricError::Width {
            left: y.cols(),
            right: dirs.dim,
        });
    }
    let mut total = 0.0;
    for d in &dirs.directions {
        total += wasserstein_1d(&project(y, d), &project(z, d))?;
    }
    let raw = total / dirs.directions.len() as f64;
    Ok(StatValue::new(Statistic::Swd, raw, y.rows(), z.rows()))
}

/// `D x D` Pearson correlation matrix (population normalization).
pub fn correlation_matrix(t: &Tensor) -> Result<Vec<Vec<f64>>, MetricError> {
    let (n, d) = (t.rows(), t.cols());
    if n < 2 {
        return Err(MetricError::TooFewPoints);
    }
    let nf = n as f64;
    let means: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| t.data()[i * d + j]).sum::<f64>() / nf)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let row = t.row(i);
        for a in 0..d {
            let da = row[a] - means[a];
            for b in a..d {
                cov[a][b] += da * (row[b] - means[b]);
            }
        }
    }
    for (j, row) in cov.iter().enumerate() {
        // The mean of a constant column can differ from it by rounding, so
        // constancy is checked directly.
        let first = t.data()[j];
        let constant = (1..n).all(|i| t.data()[i * d + j] == first);
        if constant || !(row[j] > 0.0) {
            return Err(MetricError::ZeroVariance { column: j });
        }
    }
    let sd: Vec<f64> = (0..d).map(|j| cov[j][j].sqrt()).collect();
    let mut corr = vec![vec![0.0; d]; d];
    for a in 0..d {
        corr[a][a] = 1.0;
        for b in a + 1..d {
            let c = cov[a][b] / (sd[a] * sd[b]);
            corr[a][b] = c;
            corr[b][a] = c;
        }
    }
    Ok(corr)
}

/// `||C_y - C_z||_F / D`.
pub fn frobenius_corr(y: &Tensor, z: &Tensor) -> Result<StatValue, MetricError> {
    check_pair(y, z)?;
    let (cy, cz) = (correlation_matrix(y)?, correlation_matrix(z)?);
    let sq: f64 = cy
        .iter()
        .flatten()
        .zip(cz.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let raw = sq.sqrt() / y.cols() as f64;
    Ok(StatValue::new(Statistic::Fn, raw, y.rows(), z.rows()))
}

/// All three statistics on the same pair of samples.
pub fn all_statistics(
    y: &Tensor,
    z: &Tensor,
    dirs: &DirectionSet,
) -> Result<[StatValue; 3], MetricError> {
    Ok([ks_mean(y, z)?, swd(y, z, dirs)?, frobenius_corr(y, z)?])
}
