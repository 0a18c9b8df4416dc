//! Two-sample evaluation protocol and benchmark driver.
//!
//! Null distributions come from pseudo-experiments on pairs of fresh target
//! samples. A trained flow is compared against fresh target samples several
//! times, each repeat's statistic is scored against the null, and grid
//! points are ranked by the replica-mean KS statistic.

mod evaluate;
mod null;
mod report;
mod run;
mod select;

use std::path::PathBuf;

use thiserror::Error;

use crate::flows::FlowError;
use crate::metrics::MetricError;
use crate::targets::TargetError;

pub use evaluate::{
    evaluate_model, mean_std, ConstantGenerator, EvalOutcome, Generator, TestOutcome,
    MAX_NON_FINITE_FRACTION,
};
pub use null::{
    build_null, build_nulls, NullDistribution, SigmaClass, SigmaLevel, MIN_PSEUDO_EXPERIMENTS,
};
pub use report::{
    corner_histograms, emit_report, load_nulls, save_nulls, CornerData, Histogram1d, Histogram2d,
    ReferenceRow, ResultsRow, ResultsTable, RowKind, REFERENCE_ROW,
};
pub use run::{
    load_run, run_grid, save_run, DataSizes, NullSummary, RunConfig, RunResult, TOOL_VERSION,
};
pub use select::{select_best, GridPointResult, ReplicaResult, Selection};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Invalid(String),
    #[error("every repeat was discarded: {non_finite_points} non-finite points over {repeats} repeats")]
    NonFiniteSamples {
        repeats: usize,
        non_finite_points: usize,
    },
    #[error("no grid point has a successful replica")]
    NoResult,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}
