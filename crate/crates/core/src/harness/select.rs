//! Replica bookkeeping and model selection by the mean KS statistic.

use serde::{Deserialize, Serialize};

use super::evaluate::{mean_std, EvalOutcome};
use super::HarnessError;
use crate::flows::{FlowConfig, TrainReport};
use crate::metrics::Statistic;

/// One trained (or failed) instance of a grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub replica: usize,
    pub model_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub train: Result<TrainReport, String>,
    pub evaluation: Result<EvalOutcome, String>,
    /// Evaluation of the same model before training, when requested.
    pub untrained: Option<EvalOutcome>,
}

impl ReplicaResult {
    /// Mean scaled KS over evaluation repeats, if training and evaluation
    /// both succeeded.
    pub fn ks(&self) -> Option<f64> {
        self.train.as_ref().ok()?;
        let ks = self.evaluation.as_ref().ok()?.outcome(Statistic::Ks).mean;
        ks.is_finite().then_some(ks)
    }

    pub fn succeeded(&self) -> bool {
        self.ks().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointResult {
    pub config: FlowConfig,
    pub replicas: Vec<ReplicaResult>,
}

impl GridPointResult {
    pub fn successful(&self) -> impl Iterator<Item = &ReplicaResult> {
        self.replicas.iter().filter(|r| r.succeeded())
    }

    pub fn failed_count(&self) -> usize {
        self.replicas.len() - self.successful().count()
    }

    /// Mean and standard deviation across successful replicas of each
    /// replica's mean statistic.
    pub fn replica_spread(&self, statistic: Statistic) -> Option<(f64, f64)> {
        let values: Vec<f64> = self
            .successful()
            .map(|r| r.evaluation.as_ref().unwrap().outcome(statistic).mean)
            .collect();
        (!values.is_empty()).then(|| mean_std(&values))
    }

    /// Successful replica with the lowest mean KS (ties go to the lower
    /// replica number, so the choice does not depend on storage order).
    pub fn best_replica(&self) -> Option<&ReplicaResult> {
        self.successful().min_by(|a, b| {
            a.ks()
                .unwrap()
                .total_cmp(&b.ks().unwrap())
                .then(a.replica.cmp(&b.replica))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Index of the grid point with the lowest replica-mean KS.
    pub average_best: usize,
    /// Replica number of that grid point's best replica.
    pub absolute_best: usize,
    pub mean_ks: f64,
    pub best_ks: f64,
}

/// Average-best grid point and its absolute-best replica. Grid points
/// whose replicas all failed are skipped.
pub fn select_best(points: &[GridPointResult]) -> Result<Selection, HarnessError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        if let Some((mean, _)) = p.replica_spread(Statistic::Ks) {
            if best.is_none_or(|(_, b)| mean < b) {
                best = Some((i, mean));
            }
        }
    }
    let (index, mean_ks) = best.ok_or(HarnessError::NoResult)?;
    let replica = points[index].best_replica().expect("point has a successful replica");
    Ok(Selection {
        average_best: index,
        absolute_best: replica.replica,
        mean_ks,
        best_ks: replica.ks().unwrap(),
    })
}
