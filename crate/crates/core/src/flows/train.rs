//! Maximum-likelihood training with plateau decay, early stopping and
//! restarts on non-finite losses.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Architecture, FlowError, FlowModel};
use crate::diffcore::{Adam, AdamConfig, Backend, Tape, Tensor};
use crate::seeds::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub min_improvement: f64,
    pub batch_size: usize,
    pub retry_factor: f64,
    pub retry_floor: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_architecture(arch: Architecture, seed: u64) -> Self {
        Self {
            max_epochs: 1000,
            learning_rate: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 50,
            early_stop_patience: 100,
            min_improvement: 1e-4,
            batch_size: arch.default_batch_size(),
            retry_factor: 1.0 / 3.0,
            retry_floor: 1e-6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let positive = [
            self.learning_rate,
            self.plateau_factor,
            self.retry_factor,
            self.retry_floor,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite())
            || self.plateau_factor >= 1.0
            || self.retry_factor >= 1.0
            || self.min_improvement < 0.0
        {
            return Err(FlowError::Config(format!("invalid training rates in {self:?}")));
        }
        if self.max_epochs == 0
            || self.batch_size == 0
            || self.plateau_patience == 0
            || self.early_stop_patience == 0
        {
            return Err(FlowError::Config("epochs, batch size and patiences must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Epoch (0-based) whose parameters were restored; `None` when no epoch
    /// improved on the initial parameters, which are then kept.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lr_curve: Vec<f64>,
    pub seconds: f64,
    /// Restarts caused by non-finite losses.
    pub retries: usize,
}

enum Attempt {
    Done(TrainReport),
    NonFinite(String),
}

/// Trains `model` in place and leaves it at its best-validation parameters.
///
/// Every restart begins from the parameters the model had on entry, with
/// the learning rate scaled by `retry_factor`. When the rate drops below
/// `retry_floor` the model is left at its entry parameters and an error
/// is returned.
pub fn train(
    model: &mut FlowModel,
    train_data: &Tensor,
    val_data: &Tensor,
    config: &TrainConfig,
) -> Result<TrainReport, FlowError> {
    config.validate()?;
    model.check_width(train_data)?;
    model.check_width(val_data)?;
    if train_data.rows() == 0 || val_data.rows() == 0 {
        return Err(FlowError::Config("empty training or validation data".into()));
    }
    let start = Instant::now();
    let initial = model.params().clone();
    let mut lr = config.learning_rate;
    let mut retries = 0;
    loop {
        match attempt(model, train_data, val_data, config, lr)? {
            Attempt::Done(mut report) => {
                report.retries = retries;
                report.seconds = start.elapsed().as_secs_f64();
                return Ok(report);
            }
            Attempt::NonFinite(reason) => {
                *model.params_mut() = initial.clone();
                lr *= config.retry_factor;
                if lr < config.retry_floor {
                    return Err(FlowError::TrainingFailed {
                        retries,
                        last_lr: lr / config.retry_factor,
                        reason,
                    });
                }
                retries += 1;
            }
        }
    }
}

fn gather_rows(data: &Tensor, idx: &[usize]) -> Tensor {
    let d = data.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(data.row(i));
    }
    Tensor::matrix(idx.len(), d, out)
}

fn attempt(
    model: &mut FlowModel,
    train_data: &Tensor,
    val_data: &Tensor,
    config: &TrainConfig,
    lr: f64,
) -> Result<Attempt, FlowError> {
    let initial_val = model.nll(val_data)?;
    if !initial_val.is_finite() {
        return Ok(Attempt::NonFinite("initial validation loss is not finite".into()));
    }
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let n = train_data.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = initial_val;
    let mut best_epoch = None;
    let mut best_params = model.params().clone();
    let mut since_best = 0;
    let mut since_decay = 0;
    let (mut train_curve, mut val_curve, mut lr_curve) = (Vec::new(), Vec::new(), Vec::new());

    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(derive_seed(config.seed, "epoch-shuffle", epoch as u64)));
        let mut weighted = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch = gather_rows(train_data, idx);
            let (loss, grads) = {
                let mut tape = Tape::new(model.params());
                let y = tape.constant(batch);
                let root = model.nll_with(&mut tape, &y)?;
                let loss = tape.value(&root).item();
                if !loss.is_finite() {
                    return Ok(Attempt::NonFinite(format!("loss {loss} at epoch {epoch}")));
                }
                (loss, tape.backward(root)?.param_grads())
            };
            if let Err(e) = opt.step(model.params_mut(), &grads) {
                return Ok(Attempt::NonFinite(format!("{e} at epoch {epoch}")));
            }
            weighted += loss * idx.len() as f64;
        }
        let val = model.nll(val_data)?;
        if !val.is_finite() {
            return Ok(Attempt::NonFinite(format!("validation loss {val} at epoch {epoch}")));
        }
        train_curve.push(weighted / n as f64);
        val_curve.push(val);
        lr_curve.push(opt.learning_rate());

        if val < best - config.min_improvement {
            best = val;
            best_epoch = Some(epoch);
            best_params = model.params().clone();
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }
        if since_best >= config.early_stop_patience {
            break;
        }
        if since_decay >= config.plateau_patience {
            opt.set_learning_rate(opt.learning_rate() * config.plateau_factor);
            since_decay = 0;
        }
    }
    *model.params_mut() = best_params;
    Ok(Attempt::Done(TrainReport {
        epochs: val_curve.len(),
        best_epoch,
        best_val_loss: best,
        initial_val_loss: initial_val,
        train_curve,
        val_curve,
        lr_curve,
        seconds: 0.0,
        retries: 0,
    }))
}
