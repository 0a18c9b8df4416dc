//! Null distributions of the test statistics, thresholds and p-values.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::metrics::{all_statistics, DirectionSet, Statistic};
use crate::seeds::{derive_seed, rng};
use crate::targets::{fill_cmog, CmogSpec};

pub const MIN_PSEUDO_EXPERIMENTS: usize = 100;

/// Confidence levels for the 1, 2 and 3 sigma thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SigmaLevel {
    One,
    Two,
    Three,
}

impl SigmaLevel {
    pub const ALL: [SigmaLevel; 3] = [SigmaLevel::One, SigmaLevel::Two, SigmaLevel::Three];

    pub fn confidence(self) -> f64 {
        match self {
            SigmaLevel::One => 0.68,
            SigmaLevel::Two => 0.95,
            SigmaLevel::Three => 0.99,
        }
    }
}

/// Where a statistic falls relative to the sigma thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SigmaClass {
    #[serde(rename = "<1sigma")]
    BelowOne,
    #[serde(rename = "1-2sigma")]
    OneToTwo,
    #[serde(rename = "2-3sigma")]
    TwoToThree,
    #[serde(rename = ">3sigma")]
    AboveThree,
}

impl SigmaClass {
    pub fn label(self) -> &'static str {
        match self {
            SigmaClass::BelowOne => "<1sigma",
            SigmaClass::OneToTwo => "1-2sigma",
            SigmaClass::TwoToThree => "2-3sigma",
            SigmaClass::AboveThree => ">3sigma",
        }
    }
}

/// Sorted statistic values from pseudo-experiments in which both samples
/// come from the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub statistic: Statistic,
    pub dim: usize,
    /// Points per sample.
    pub sample_size: usize,
    pub seed: u64,
    /// Seed of the target the pseudo-experiments were drawn from.
    pub target_seed: u64,
    pub values: Vec<f64>,
}

impl NullDistribution {
    pub fn from_values(
        statistic: Statistic,
        dim: usize,
        sample_size: usize,
        seed: u64,
        target_seed: u64,
        mut values: Vec<f64>,
    ) -> Result<Self, HarnessError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Invalid("null values must be finite and non-empty".into()));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(Self {
            statistic,
            dim,
            sample_size,
            seed,
            target_seed,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Quantile at probability `q`, interpolating linearly between order
    /// statistics placed at `(i - 0.5) / n` (so the 0.95 quantile of
    /// `1..=10000` is 9500.5).
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.values.len();
        let h = (n as f64 * q + 0.5).clamp(1.0, n as f64);
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        let a = self.values[lo - 1];
        if lo == n || frac == 0.0 {
            a
        } else {
            a + frac * (self.values[lo] - a)
        }
    }

    pub fn threshold(&self, level: SigmaLevel) -> f64 {
        self.quantile(level.confidence())
    }

    /// Fraction of null values at or above `t`.
    pub fn p_value(&self, t: f64) -> f64 {
        let below = self.values.partition_point(|&v| v < t);
        (self.values.len() - below) as f64 / self.values.len() as f64
    }

    pub fn classify(&self, t: f64) -> SigmaClass {
        if t > self.threshold(SigmaLevel::Three) {
            SigmaClass::AboveThree
        } else if t > self.threshold(SigmaLevel::Two) {
            SigmaClass::TwoToThree
        } else if t > self.threshold(SigmaLevel::One) {
            SigmaClass::OneToTwo
        } else {
            SigmaClass::BelowOne
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Null distributions of all three statistics from the same
/// pseudo-experiments: pseudo-experiment `j` compares two fresh target
/// samples of `sample_size` points seeded from `(seed, j)`.
pub fn build_nulls(
    spec: &CmogSpec,
    sample_size: usize,
    n_pseudo: usize,
    dirs: &DirectionSet,
    seed: u64,
) -> Result<[NullDistribution; 3], HarnessError> {
    if n_pseudo < MIN_PSEUDO_EXPERIMENTS {
        return Err(HarnessError::Invalid(format!(
            "at least {MIN_PSEUDO_EXPERIMENTS} pseudo-experiments are needed, got {n_pseudo}"
        )));
    }
    if sample_size < 2 {
        return Err(HarnessError::Invalid("null samples need at least 2 points".into()));
    }
    let mut columns = [
        Vec::with_capacity(n_pseudo),
        Vec::with_capacity(n_pseudo),
        Vec::with_capacity(n_pseudo),
    ];
    for j in 0..n_pseudo as u64 {
        let a = fill_cmog(spec, sample_size, &mut rng(derive_seed(seed, "null-first", j)));
        let b = fill_cmog(spec, sample_size, &mut rng(derive_seed(seed, "null-second", j)));
        let stats = all_statistics(&a, &b, dirs)?;
        for (col, s) in columns.iter_mut().zip(stats) {
            col.push(s.scaled);
        }
    }
    let [ks, swd, fnorm] = columns;
    let make = |stat, values| {
        NullDistribution::from_values(stat, spec.dim, sample_size, seed, spec.seed, values)
    };
    Ok([
        make(Statistic::Ks, ks)?,
        make(Statistic::Swd, swd)?,
        make(Statistic::Fn, fnorm)?,
    ])
}

/// Null distribution of a single statistic.
pub fn build_null(
    statistic: Statistic,
    spec: &CmogSpec,
    sample_size: usize,
    n_pseudo: usize,
    dirs: &DirectionSet,
    seed: u64,
) -> Result<NullDistribution, HarnessError> {
    let [ks, swd, fnorm] = build_nulls(spec, sample_size, n_pseudo, dirs, seed)?;
    Ok(match statistic {
        Statistic::Ks => ks,
        Statistic::Swd => swd,
        Statistic::Fn => fnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> NullDistribution {
        let values = (1..=n).rev().map(|v| v as f64).collect();
        NullDistribution::from_values(Statistic::Ks, 1, 10, 0, 0, values).unwrap()
    }

    #[test]
    fn hand_quantiles() {
        let null = synthetic(10_000);
        assert_eq!(null.threshold(SigmaLevel::Two), 9500.5);
        // 0.68 and 0.99 are not exact in binary.
        assert!((null.threshold(SigmaLevel::One) - 6800.5).abs() < 1e-9);
        assert!((null.threshold(SigmaLevel::Three) - 9900.5).abs() < 1e-9);
        assert_eq!(null.quantile(0.0), 1.0);
        assert_eq!(null.quantile(1.0), 10_000.0);
    }

    #[test]
    fn p_value_edges() {
        let null = synthetic(1000);
        assert_eq!(null.p_value(0.5), 1.0);
        assert_eq!(null.p_value(1000.5), 0.0);
        assert_eq!(null.p_value(1000.0), 0.001);
        assert_eq!(null.classify(0.0), SigmaClass::BelowOne);
        assert_eq!(null.classify(2000.0), SigmaClass::AboveThree);
    }

    #[test]
    fn exceedances_of_the_95_percent_quantile() {
        for n in [100, 1000, 1234] {
            let null = synthetic(n);
            let t = null.threshold(SigmaLevel::Two);
            let above = null.values.iter().filter(|&&v| v > t).count();
            assert_eq!(above, (0.05 * n as f64).ceil() as usize);
        }
    }
}
