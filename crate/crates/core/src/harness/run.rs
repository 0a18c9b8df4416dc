//! Run configuration, seed streams and the grid driver.
//!
//! Seeds used by a run with master seed `m` (all via [`derive_seed`]):
//!
//! | purpose                         | label                  | index     |
//! |---------------------------------|------------------------|-----------|
//! | target parameters               | `target`               | `D`       |
//! | training / validation data      | `train-data` / `validation-data` | 0 |
//! | null pseudo-experiments         | `null`                 | 0         |
//! | SWD projection directions       | `directions`           | 0         |
//! | model init of replica `r`       | `model <label>`        | `r`       |
//! | training shuffles of replica `r`| `train <label>`        | `r`       |
//! | evaluation repeats of replica `r`| `eval <label>`        | `r`       |
//!
//! `<label>` is [`FlowConfig::label`], so a grid point's replicas do not
//! depend on which other points share the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_model, EvalOutcome};
use super::null::{build_nulls, NullDistribution, SigmaLevel};
use super::select::{select_best, GridPointResult, ReplicaResult, Selection};
use super::HarnessError;
use crate::flows::{save_model, train, FlowConfig, FlowModel, InitMode, TrainConfig};
use crate::metrics::{sample_directions, DirectionSet, Statistic};
use crate::seeds::{derive_seed, rng};
use crate::targets::{fill_cmog, make_cmog, CmogSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sample sizes and counts of the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSizes {
    pub train: usize,
    pub validation: usize,
    /// Points per sample in evaluation repeats and pseudo-experiments.
    pub test: usize,
    pub n_pseudo: usize,
    pub replicas: usize,
    pub repeats: usize,
}

impl DataSizes {
    pub fn desk() -> Self {
        Self {
            train: 10_000,
            validation: 3_000,
            test: 10_000,
            n_pseudo: 1_000,
            replicas: 3,
            repeats: 5,
        }
    }

    pub fn full() -> Self {
        Self {
            train: 100_000,
            validation: 30_000,
            test: 100_000,
            n_pseudo: 10_000,
            replicas: 10,
            repeats: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub target: CmogSpec,
    pub grid: Vec<FlowConfig>,
    pub sizes: DataSizes,
    pub master_seed: u64,
    /// Caps the training schedule's epoch budget.
    pub max_epochs: Option<usize>,
    /// Also evaluate every replica before training.
    pub evaluate_untrained: bool,
    /// Directory for model files; nothing is written when unset.
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale run on a 3-component target derived from the master seed.
    pub fn desk(dim: usize, grid: Vec<FlowConfig>, master_seed: u64) -> Result<Self, HarnessError> {
        Ok(Self {
            target: make_cmog(dim, 3, Self::target_seed(master_seed, dim))?,
            grid,
            sizes: DataSizes::desk(),
            master_seed,
            max_epochs: None,
            evaluate_untrained: false,
            output: None,
        })
    }

    pub fn target_seed(master_seed: u64, dim: usize) -> u64 {
        derive_seed(master_seed, "target", dim as u64)
    }

    pub fn null_seed(&self) -> u64 {
        derive_seed(self.master_seed, "null", 0)
    }

    pub fn directions(&self) -> DirectionSet {
        sample_directions(self.target.dim, derive_seed(self.master_seed, "directions", 0))
    }

    pub fn model_seed(&self, config: &FlowConfig, replica: usize) -> u64 {
        derive_seed(self.master_seed, &format!("model {}", config.label()), replica as u64)
    }

    pub fn train_seed(&self, config: &FlowConfig, replica: usize) -> u64 {
        derive_seed(self.master_seed, &format!("train {}", config.label()), replica as u64)
    }

    pub fn eval_seed(&self, config: &FlowConfig, replica: usize) -> u64 {
        derive_seed(self.master_seed, &format!("eval {}", config.label()), replica as u64)
    }

    /// Training and validation samples.
    pub fn data(&self) -> (crate::diffcore::Tensor, crate::diffcore::Tensor) {
        let seed = |label| derive_seed(self.master_seed, label, 0);
        (
            fill_cmog(&self.target, self.sizes.train, &mut rng(seed("train-data"))),
            fill_cmog(&self.target, self.sizes.validation, &mut rng(seed("validation-data"))),
        )
    }

    pub fn train_config(&self, config: &FlowConfig, replica: usize) -> TrainConfig {
        let mut t = TrainConfig::for_architecture(config.architecture, self.train_seed(config, replica));
        if let Some(max) = self.max_epochs {
            t.max_epochs = max;
        }
        t
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = &self.sizes;
        if [s.train, s.validation, s.test, s.n_pseudo, s.replicas, s.repeats].contains(&0) {
            return Err(HarnessError::Invalid("sizes and counts must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(HarnessError::Invalid("the grid is empty".into()));
        }
        self.target.validate()?;
        for c in &self.grid {
            c.validate()?;
            if c.dim != self.target.dim {
                return Err(HarnessError::Invalid(format!(
                    "grid point {} has dimension {}, target has {}",
                    c.label(),
                    c.dim,
                    self.target.dim
                )));
            }
        }
        Ok(())
    }

    pub fn model_path(&self, config: &FlowConfig, replica: usize) -> Option<PathBuf> {
        self.output
            .as_ref()
            .map(|dir| dir.join("models").join(model_file_name(config, replica)))
    }
}

pub fn model_file_name(config: &FlowConfig, replica: usize) -> String {
    format!("{}-r{replica}.json", config.label().replace(' ', "_"))
}

/// Thresholds of one null distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub statistic: Statistic,
    pub n_pseudo: usize,
    pub sample_size: usize,
    pub seed: u64,
    pub mean: f64,
    /// 1, 2 and 3 sigma thresholds.
    pub thresholds: [f64; 3],
}

impl NullSummary {
    pub fn of(null: &NullDistribution) -> Self {
        Self {
            statistic: null.statistic,
            n_pseudo: null.len(),
            sample_size: null.sample_size,
            seed: null.seed,
            mean: null.mean(),
            thresholds: SigmaLevel::ALL.map(|l| null.threshold(l)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub tool_version: String,
    pub config: RunConfig,
    pub nulls: Vec<NullSummary>,
    pub points: Vec<GridPointResult>,
    pub selection: Result<Selection, String>,
    /// Trained models, indexed like `points[i].replicas[r]`; not persisted
    /// here (see [`RunConfig::output`]).
    #[serde(skip)]
    pub models: Vec<Vec<Option<FlowModel>>>,
}

impl RunResult {
    pub fn master_seed(&self) -> u64 {
        self.config.master_seed
    }

    pub fn null(&self, statistic: Statistic) -> Option<&NullSummary> {
        self.nulls.iter().find(|n| n.statistic == statistic)
    }

    /// Model of the absolute-best replica, from memory or from the model
    /// directory.
    pub fn best_model(&self) -> Result<Option<FlowModel>, HarnessError> {
        let Ok(sel) = &self.selection else {
            return Ok(None);
        };
        let point = &self.points[sel.average_best];
        let slot = point.replicas.iter().position(|r| r.replica == sel.absolute_best);
        if let Some(Some(model)) = slot.and_then(|i| self.models.get(sel.average_best)?.get(i)) {
            return Ok(Some(model.clone()));
        }
        match self.config.model_path(&point.config, sel.absolute_best) {
            Some(path) if path.exists() => Ok(Some(crate::flows::load_model(&path)?)),
            _ => Ok(None),
        }
    }
}

fn run_replica(
    config: &RunConfig,
    point: &FlowConfig,
    replica: usize,
    data: &(crate::diffcore::Tensor, crate::diffcore::Tensor),
    nulls: &[NullDistribution; 3],
    dirs: &DirectionSet,
) -> Result<(ReplicaResult, Option<FlowModel>), HarnessError> {
    let model_seed = config.model_seed(point, replica);
    let eval_seed = config.eval_seed(point, replica);
    let train_cfg = config.train_config(point, replica);
    let mut model = FlowModel::new(point.clone(), InitMode::Random, model_seed)?;
    let evaluate = |m: &FlowModel| {
        evaluate_model(m, &config.target, config.sizes.test, config.sizes.repeats, nulls, dirs, eval_seed)
    };
    let untrained = if config.evaluate_untrained {
        Some(evaluate(&model)?)
    } else {
        None
    };
    let report = train(&mut model, &data.0, &data.1, &train_cfg).map_err(|e| e.to_string());
    let evaluation: Result<EvalOutcome, String> = match &report {
        Ok(_) => evaluate(&model).map_err(|e| e.to_string()),
        Err(e) => Err(format!("not evaluated: {e}")),
    };
    if report.is_ok() {
        if let Some(path) = config.model_path(point, replica) {
            save_model(&model, &path)?;
        }
    }
    let result = ReplicaResult {
        replica,
        model_seed,
        train_seed: train_cfg.seed,
        eval_seed,
        train: report,
        evaluation,
        untrained,
    };
    let model = result.train.is_ok().then_some(model);
    Ok((result, model))
}

/// Builds the nulls, trains and evaluates every replica of every grid point
/// and selects the best. Training and evaluation failures are recorded in
/// the replica results; configuration and I/O problems abort the run.
pub fn run_grid(config: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<RunResult, HarnessError> {
    config.validate()?;
    if let Some(dir) = &config.output {
        let models = dir.join("models");
        std::fs::create_dir_all(&models).map_err(|source| HarnessError::Io { path: models, source })?;
    }
    let dirs = config.directions();
    progress(&format!(
        "building nulls: {} pseudo-experiments of {} points",
        config.sizes.n_pseudo, config.sizes.test
    ));
    let nulls = build_nulls(
        &config.target,
        config.sizes.test,
        config.sizes.n_pseudo,
        &dirs,
        config.null_seed(),
    )?;
    let data = config.data();
    let mut points = Vec::with_capacity(config.grid.len());
    let mut models = Vec::with_capacity(config.grid.len());
    for point in &config.grid {
        let mut replicas = Vec::with_capacity(config.sizes.replicas);
        let mut trained = Vec::with_capacity(config.sizes.replicas);
        for r in 0..config.sizes.replicas {
            let (result, model) = run_replica(config, point, r, &data, &nulls, &dirs)?;
            progress(&replica_line(point, &result));
            replicas.push(result);
            trained.push(model);
        }
        points.push(GridPointResult {
            config: point.clone(),
            replicas,
        });
        models.push(trained);
    }
    let selection = select_best(&points).map_err(|e| e.to_string());
    Ok(RunResult {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        nulls: nulls.iter().map(NullSummary::of).collect(),
        points,
        selection,
        models,
    })
}

fn replica_line(point: &FlowConfig, r: &ReplicaResult) -> String {
    let head = format!("{} replica {}", point.label(), r.replica);
    match (&r.train, &r.evaluation) {
        (Ok(t), Ok(e)) => format!(
            "{head}: {} epochs in {:.0} s, best val {:.4}, t_KS {:.3}",
            t.epochs,
            t.seconds,
            t.best_val_loss,
            e.outcome(Statistic::Ks).mean
        ),
        (Err(e), _) | (_, Err(e)) => format!("{head}: failed: {e}"),
    }
}

pub fn save_run(run: &RunResult, path: &Path) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(run).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_run(path: &Path) -> Result<RunResult, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}
