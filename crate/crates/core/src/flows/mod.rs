//! Flow models: chains of bijectors over a standard-normal base.
//!
//! A model stores its layers in generative order `g_1, P_1, g_2, ..., g_n`
//! (permutations `P_i` between bijectors). Sampling pushes base draws
//! through the chain front to back; densities pull data back through the
//! inverses in reverse order and add the log-determinants.

mod io;
mod train;

use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bijectors::{BijectorError, Layer, LayerKind, Permutation, SplineConfig};
use crate::diffcore::{Backend, DiffError, Eval, ParamStore, Tensor};
use crate::seeds::{derive_seed, rng};
use crate::targets::{fill_base, SampleBatch, SampleSource};

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use train::{train, TrainConfig, TrainReport};

/// Rows per chunk when evaluating densities or sampling without gradients.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("data has {got} columns, model expects {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Bijector(#[from] BijectorError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training failed after {retries} retries (last learning rate {last_lr:e}): {reason}")]
    TrainingFailed {
        retries: usize,
        last_lr: f64,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "RealNVP")]
    RealNvp,
    #[serde(rename = "MAF")]
    Maf,
    #[serde(rename = "C-RQS")]
    CRqs,
    #[serde(rename = "A-RQS")]
    ARqs,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::RealNvp,
        Architecture::Maf,
        Architecture::CRqs,
        Architecture::ARqs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::RealNvp => "RealNVP",
            Architecture::Maf => "MAF",
            Architecture::CRqs => "C-RQS",
            Architecture::ARqs => "A-RQS",
        }
    }

    pub fn is_spline(self) -> bool {
        matches!(self, Architecture::CRqs | Architecture::ARqs)
    }

    pub fn is_coupling(self) -> bool {
        matches!(self, Architecture::RealNvp | Architecture::CRqs)
    }

    /// Training batch size: 256 for RealNVP, 512 for the others.
    pub fn default_batch_size(self) -> usize {
        match self {
            Architecture::RealNvp => 256,
            _ => 512,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "realnvp" => Ok(Architecture::RealNvp),
            "maf" => Ok(Architecture::Maf),
            "crqs" => Ok(Architecture::CRqs),
            "arqs" => Ok(Architecture::ARqs),
            _ => Err(FlowError::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Hyperparameters of one flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub architecture: Architecture,
    pub dim: usize,
    pub bijectors: usize,
    pub hidden: Vec<usize>,
    /// Spline bins `K`; ignored by the affine architectures.
    pub bins: usize,
    /// Spline half-range `B`; ignored by the affine architectures.
    pub bound: f64,
}

impl FlowConfig {
    pub fn new(architecture: Architecture, dim: usize, bijectors: usize, hidden: Vec<usize>) -> Self {
        Self {
            architecture,
            dim,
            bijectors,
            hidden,
            bins: 8,
            bound: 16.0,
        }
    }

    pub fn with_spline(mut self, bins: usize, bound: f64) -> Self {
        self.bins = bins;
        self.bound = bound;
        self
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.dim == 0 {
            return Err(FlowError::Config("dimension must be positive".into()));
        }
        if self.bijectors > 0 && self.dim < 2 {
            return Err(FlowError::Config(format!(
                "{} bijectors need at least 2 dimensions",
                self.architecture
            )));
        }
        if self.hidden.contains(&0) {
            return Err(FlowError::Config("hidden widths must be positive".into()));
        }
        if self.architecture.is_spline() {
            SplineConfig::new(self.bins, self.bound)
                .map_err(|e| FlowError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn layer_kind(&self) -> LayerKind {
        let spline = || SplineConfig {
            bins: self.bins,
            bound: self.bound,
        };
        match self.architecture {
            Architecture::RealNvp => LayerKind::AffineCoupling,
            Architecture::Maf => LayerKind::MaskedAffine,
            Architecture::CRqs => LayerKind::SplineCoupling(spline()),
            Architecture::ARqs => LayerKind::SplineAutoregressive(spline()),
        }
    }

    /// Short label such as `A-RQS 2x3x128 K8 B16`.
    pub fn label(&self) -> String {
        let hidden = match self.hidden.as_slice() {
            [] => "0".to_string(),
            [w, rest @ ..] if rest.iter().all(|v| v == w) => format!("{}x{}", self.hidden.len(), w),
            h => h.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"),
        };
        let mut s = format!("{} {}x{}", self.architecture, self.bijectors, hidden);
        if self.architecture.is_spline() {
            s.push_str(&format!(" K{} B{}", self.bins, self.bound));
        }
        s
    }
}

/// How conditioner weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Glorot-uniform weights everywhere, zero biases.
    Random,
    /// Glorot hidden layers with zeroed output layers, so the flow starts
    /// as the identity map.
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowModel {
    config: FlowConfig,
    init: InitMode,
    seed: u64,
    layers: Vec<Layer>,
    store: ParamStore,
}

impl FlowModel {
    /// Builds a flow; all random choices (weights, masks, permutations)
    /// derive from `seed`.
    pub fn new(config: FlowConfig, init: InitMode, seed: u64) -> Result<Self, FlowError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let kind = config.layer_kind();
        for i in 0..config.bijectors {
            if i > 0 {
                let mut r = rng(derive_seed(seed, "permutation", i as u64));
                let perm = match (config.architecture.is_coupling(), i % 2 == 1) {
                    (true, true) => Permutation::swap_halves(config.dim),
                    (true, false) => Permutation::random(config.dim, &mut r),
                    (false, _) => Permutation::random_moving_first(config.dim, &mut r),
                };
                layers.push(Layer::Permutation(perm));
            }
            let mut r = rng(derive_seed(seed, "bijector", i as u64));
            let layer = Layer::new_of_kind(kind, &mut store, config.dim, &config.hidden, &mut r)?;
            if init == InitMode::Identity {
                layer.set_identity(&mut store);
            }
            layers.push(layer);
        }
        Ok(Self {
            config,
            init,
            seed,
            layers,
            store,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn init_mode(&self) -> InitMode {
        self.init
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of scalar trainable parameters.
    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    pub(crate) fn from_parts(
        config: FlowConfig,
        init: InitMode,
        seed: u64,
        layers: Vec<Layer>,
        store: ParamStore,
    ) -> Self {
        Self {
            config,
            init,
            seed,
            layers,
            store,
        }
    }

    pub(crate) fn check_width(&self, t: &Tensor) -> Result<(), FlowError> {
        if t.shape().len() != 2 || t.cols() != self.dim() {
            return Err(FlowError::Width {
                expected: self.dim(),
                got: if t.shape().len() == 2 { t.cols() } else { 0 },
            });
        }
        Ok(())
    }

    /// Normalizing pass: `log p(y) = log N(f(y); 0, I) + sum log|det J_f|`.
    pub fn log_prob_with<B: Backend>(&self, b: &mut B, y: &B::V) -> Result<B::V, FlowError> {
        let n = b.value(y).rows();
        let mut x = y.clone();
        let mut total = b.constant(Tensor::zeros(&[n]));
        for layer in self.layers.iter().rev() {
            let (nx, ld) = layer.inverse(b, &x)?;
            total = b.add(&total, &ld);
            x = nx;
        }
        let sq = b.square(&x);
        let ss = b.sum_cols(&sq);
        let half = b.scale(&ss, -0.5);
        let base = b.add_scalar(&half, -0.5 * self.dim() as f64 * (2.0 * PI).ln());
        Ok(b.add(&base, &total))
    }

    /// Mean negative log-likelihood as a scalar node.
    pub fn nll_with<B: Backend>(&self, b: &mut B, y: &B::V) -> Result<B::V, FlowError> {
        let lp = self.log_prob_with(b, y)?;
        let m = b.mean(&lp);
        Ok(b.neg(&m))
    }

    /// Per-row log density.
    pub fn log_prob(&self, y: &Tensor) -> Result<Tensor, FlowError> {
        self.check_width(y)?;
        let mut out = Vec::with_capacity(y.rows());
        for start in (0..y.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(y.rows());
            let chunk = y.slice_rows(start, end);
            let mut b = Eval::new(&self.store);
            out.extend_from_slice(self.log_prob_with(&mut b, &chunk)?.data());
        }
        Ok(Tensor::vector(out))
    }

    /// `-mean(log_prob(y))`.
    pub fn nll(&self, y: &Tensor) -> Result<f64, FlowError> {
        let lp = self.log_prob(y)?;
        Ok(-lp.sum() / lp.len() as f64)
    }

    /// Generative pass of a base batch.
    pub fn push_forward(&self, x: &Tensor) -> Result<Tensor, FlowError> {
        self.check_width(x)?;
        let mut parts = Vec::new();
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let mut b = Eval::new(&self.store);
            let mut v = x.slice_rows(start, end);
            for layer in &self.layers {
                v = layer.forward(&mut b, &v)?.0;
            }
            parts.push(v);
        }
        if parts.is_empty() {
            return Ok(Tensor::matrix(0, self.dim(), Vec::new()));
        }
        Ok(Tensor::concat_rows(&parts))
    }

    /// Normalizing pass of a data batch (data to base space).
    pub fn pull_back(&self, y: &Tensor) -> Result<Tensor, FlowError> {
        self.check_width(y)?;
        let mut b = Eval::new(&self.store);
        let mut v = y.clone();
        for layer in self.layers.iter().rev() {
            v = layer.inverse(&mut b, &v)?.0;
        }
        Ok(v)
    }

    /// `n` draws: standard-normal base points from `seed` pushed through the
    /// generative direction.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch, FlowError> {
        let base = fill_base(self.dim(), n, &mut rng(seed));
        Ok(SampleBatch {
            data: self.push_forward(&base)?,
            source: SampleSource::Flow,
            seed,
        })
    }
}
