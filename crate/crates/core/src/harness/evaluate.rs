//! Repeated two-sample evaluation of a generator against the target.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::null::{NullDistribution, SigmaClass};
use super::HarnessError;
use crate::diffcore::Tensor;
use crate::flows::FlowModel;
use crate::metrics::{ks_mean, frobenius_corr, swd, DirectionSet, Statistic};
use crate::seeds::{derive_seed, rng};
use crate::targets::{fill_cmog, CmogSpec};

/// Repeats whose generated sample has more than this fraction of
/// non-finite points are discarded.
pub const MAX_NON_FINITE_FRACTION: f64 = 0.01;

/// Anything that produces `n x D` samples from a seed.
pub trait Generator {
    fn dim(&self) -> usize;
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor, HarnessError>;
}

impl Generator for FlowModel {
    fn dim(&self) -> usize {
        FlowModel::dim(self)
    }

    fn generate(&self, n: usize, seed: u64) -> Result<Tensor, HarnessError> {
        Ok(self.sample(n, seed)?.data)
    }
}

/// The target itself, for checking calibration under the null.
impl Generator for CmogSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn generate(&self, n: usize, seed: u64) -> Result<Tensor, HarnessError> {
        Ok(fill_cmog(self, n, &mut rng(seed)))
    }
}

/// Every draw is the same point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantGenerator(pub Vec<f64>);

impl Generator for ConstantGenerator {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn generate(&self, n: usize, _seed: u64) -> Result<Tensor, HarnessError> {
        let data = (0..n).flat_map(|_| self.0.iter().copied()).collect();
        Ok(Tensor::matrix(n, self.0.len(), data))
    }
}

/// Per-repeat values of one statistic and their summary against its null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: Statistic,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub std: f64,
    /// p-value of the mean.
    pub p_value: f64,
    /// p-values at `mean + std` and `mean - std`.
    pub p_value_range: (f64, f64),
    pub sigma: SigmaClass,
    /// Set when the statistic could not be computed in some repeat.
    pub failure: Option<String>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl TestOutcome {
    pub fn from_values(values: Vec<f64>, null: &NullDistribution) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            statistic: null.statistic,
            p_value: null.p_value(mean),
            p_value_range: (null.p_value(mean + std), null.p_value(mean - std)),
            sigma: null.classify(mean),
            values,
            mean,
            std,
            failure: None,
        }
    }

    fn failed(statistic: Statistic, reason: String) -> Self {
        Self {
            statistic,
            values: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
            p_value: 0.0,
            p_value_range: (0.0, 0.0),
            sigma: SigmaClass::AboveThree,
            failure: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// KS, SWD and FN, in that order.
    pub outcomes: Vec<TestOutcome>,
    pub repeats: usize,
    pub discarded_repeats: usize,
    pub non_finite_points: usize,
    /// Mean seconds per repeat spent generating the sample.
    pub generation_seconds: f64,
    /// Mean seconds per repeat spent computing the statistics.
    pub metric_seconds: f64,
}

impl EvalOutcome {
    pub fn outcome(&self, statistic: Statistic) -> &TestOutcome {
        self.outcomes
            .iter()
            .find(|o| o.statistic == statistic)
            .expect("all statistics evaluated")
    }

    /// Generation plus metric time per repeat.
    pub fn prediction_seconds(&self) -> f64 {
        self.generation_seconds + self.metric_seconds
    }
}

fn finite_rows(t: &Tensor) -> (Tensor, usize) {
    let d = t.cols();
    let mut data = Vec::with_capacity(t.len());
    let mut bad = 0;
    for i in 0..t.rows() {
        let row = t.row(i);
        if row.iter().all(|v| v.is_finite()) {
            data.extend_from_slice(row);
        } else {
            bad += 1;
        }
    }
    (Tensor::matrix(t.rows() - bad, d, data), bad)
}

/// Compares `repeats` fresh generator samples against fresh target samples
/// of `n` points each. Repeat `k` draws the target from
/// `derive_seed(seed, "eval-target", k)` and the generator from
/// `derive_seed(seed, "eval-generated", k)`.
pub fn evaluate_model<G: Generator + ?Sized>(
    generator: &G,
    spec: &CmogSpec,
    n: usize,
    repeats: usize,
    nulls: &[NullDistribution; 3],
    dirs: &DirectionSet,
    seed: u64,
) -> Result<EvalOutcome, HarnessError> {
    if repeats == 0 || n < 2 {
        return Err(HarnessError::Invalid("need at least one repeat of 2 or more points".into()));
    }
    if generator.dim() != spec.dim || dirs.dim != spec.dim {
        return Err(HarnessError::Invalid(format!(
            "generator dimension {} does not match target dimension {}",
            generator.dim(),
            spec.dim
        )));
    }
    let mut values: [Vec<f64>; 3] = Default::default();
    let mut failures: [Option<String>; 3] = Default::default();
    let (mut gen_time, mut metric_time) = (0.0, 0.0);
    let (mut discarded, mut non_finite) = (0, 0);
    for k in 0..repeats as u64 {
        let target = fill_cmog(spec, n, &mut rng(derive_seed(seed, "eval-target", k)));
        let start = Instant::now();
        let generated = generator.generate(n, derive_seed(seed, "eval-generated", k))?;
        gen_time += start.elapsed().as_secs_f64();
        let (generated, bad) = finite_rows(&generated);
        non_finite += bad;
        if bad as f64 > MAX_NON_FINITE_FRACTION * n as f64 || generated.rows() < 2 {
            discarded += 1;
            continue;
        }
        let start = Instant::now();
        let results = [
            ks_mean(&target, &generated),
            swd(&target, &generated, dirs),
            frobenius_corr(&target, &generated),
        ];
        metric_time += start.elapsed().as_secs_f64();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => values[i].push(v.scaled),
                Err(e) => {
                    failures[i].get_or_insert_with(|| e.to_string());
                }
            }
        }
    }
    let kept = repeats - discarded;
    if kept == 0 {
        return Err(HarnessError::NonFiniteSamples {
            repeats,
            non_finite_points: non_finite,
        });
    }
    let outcomes = values
        .into_iter()
        .zip(failures)
        .zip(nulls)
        .map(|((v, f), null)| match f {
            Some(reason) => TestOutcome::failed(null.statistic, reason),
            None => TestOutcome::from_values(v, null),
        })
        .collect();
    Ok(EvalOutcome {
        outcomes,
        repeats,
        discarded_repeats: discarded,
        non_finite_points: non_finite,
        generation_seconds: gen_time / kept as f64,
        metric_seconds: metric_time / kept as f64,
    })
}
