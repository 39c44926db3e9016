//! Masked-LM pretraining and builder fine-tuning loops, with the learning-rate
//! schedule and per-epoch loss curves they log.

mod builder;
mod mlm;
mod state;

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::gridworld::{Action, GridError};
use crate::model::{Model, ModelError};
use crate::numcore::{AdamConfig, AdamState, ParamGrads, TensorError};
use crate::par::Execution;

pub use builder::{builder_examples, decode_actions, evaluate_builder_loss, train_builder, BuilderExample, BuilderRun};
pub use mlm::{mlm_loss, pretrain_mlm, pretrain_mlm_resume, split_texts, MlmRun};
pub use state::{load_train_state, save_train_state};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training text")]
    EmptyCorpus,
    #[error("no builder turns to train on")]
    NoExamples,
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFiniteLoss { what: &'static str, epoch: usize, step: usize },
    #[error("episode {episode} turn {turn}: gold action {action:?} at step {step} is not feasible")]
    GoldNotFeasible {
        episode: String,
        turn: usize,
        step: usize,
        action: Action,
    },
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("episode {episode}: {source}")]
    Episode {
        episode: String,
        #[source]
        source: GridError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Linear warmup from 0 to `peak_lr`, then linear decay back to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
}

impl LrSchedule {
    pub fn new(total_steps: usize, warmup_steps: usize, peak_lr: f64) -> Result<Self, TrainError> {
        if warmup_steps > total_steps {
            return Err(TrainError::InvalidConfig(format!(
                "warmup {warmup_steps} exceeds {total_steps} total steps"
            )));
        }
        Ok(LrSchedule {
            total_steps,
            warmup_steps,
            peak_lr,
        })
    }

    /// Warmup length is `round(warmup_fraction × total_steps)`.
    pub fn from_fraction(total_steps: usize, warmup_fraction: f64, peak_lr: f64) -> Result<Self, TrainError> {
        let warmup = (warmup_fraction * total_steps as f64).round() as usize;
        Self::new(total_steps, warmup.min(total_steps), peak_lr)
    }
}

/// The ramp and decay are computed as `peak × ratio`, so the peak itself and
/// exact midpoints come out without rounding.
pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f64, TrainError> {
    let LrSchedule {
        total_steps: total,
        warmup_steps: warmup,
        peak_lr: peak,
    } = *schedule;
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    if step < warmup {
        return Ok(peak * (step as f64 / warmup as f64));
    }
    if step == warmup {
        return Ok(if total == 0 { 0.0 } else { peak });
    }
    Ok(peak * ((total - step) as f64 / (total - warmup) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,valid_loss,seconds` with shortest round-trip floats;
    /// a missing validation loss is an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss,seconds\n");
        for r in &self.records {
            let valid = r.valid_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, valid, r.seconds);
        }
        s
    }

    /// Same records with timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> LossCurve {
        LossCurve {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord { seconds: 0.0, ..*r })
                .collect(),
        }
    }
}

/// `(step, lr)` for every optimizer update.
pub fn lr_csv(log: &[(usize, f64)]) -> String {
    let mut s = String::from("step,lr\n");
    for (step, lr) in log {
        let _ = writeln!(s, "{step},{lr}");
    }
    s
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("`{key}` cannot be `{value}`"))
}

/// Options shared by both training phases.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Betas, epsilon and decoupled weight decay.
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// When 0, training length is `epochs` passes over the data; otherwise
    /// exactly this many optimizer steps, cycling through epochs as needed.
    pub max_steps: usize,
    /// Record elapsed seconds in loss curves. Off by default: the column is
    /// then 0 and repeated runs produce identical files.
    pub wall_clock: bool,
    pub execution: Execution,
}

impl OptimConfig {
    fn with_epochs(epochs: usize) -> Self {
        OptimConfig {
            epochs,
            peak_lr: 1e-4,
            warmup_fraction: 0.1,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: 0.0,
            max_steps: 0,
            wall_clock: false,
            execution: Execution::Sequential,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.adam.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return bad(format!("adam betas must lie in [0, 1) and eps be positive, got {beta1}, {beta2}, {eps}"));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "peak_lr" => self.peak_lr.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "weight_decay" => self.adam.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "peak_lr" => self.peak_lr = parse_value(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "wall_clock" => self.wall_clock = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn total_steps(&self, steps_per_epoch: usize) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.epochs * steps_per_epoch
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub mask_prob: f64,
    pub valid_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            optim: OptimConfig::with_epochs(100),
            mask_prob: 0.15,
            valid_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "epochs",
        "peak_lr",
        "warmup_fraction",
        "batch_size",
        "seed",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "grad_clip",
        "max_steps",
        "wall_clock",
        "mask_prob",
        "valid_fraction",
    ];

    pub fn validate(&self) -> Result<(), TrainError> {
        self.optim.validate()?;
        if self.optim.epochs == 0 && self.optim.max_steps == 0 {
            return Err(TrainError::InvalidConfig("pretraining needs at least one epoch".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(TrainError::InvalidConfig(format!("mask_prob {} outside (0, 1]", self.mask_prob)));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(TrainError::InvalidConfig(format!(
                "valid_fraction {} outside [0, 1)",
                self.valid_fraction
            )));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        match key {
            "mask_prob" => Some(self.mask_prob.to_string()),
            "valid_fraction" => Some(self.valid_fraction.to_string()),
            _ => self.optim.get(key),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "mask_prob" => self.mask_prob = parse_value(key, value)?,
            "valid_fraction" => self.valid_fraction = parse_value(key, value)?,
            _ if self.optim.set(key, value)? => {}
            _ => return Err(format!("unknown pretrain key `{key}`")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    /// Decoding cap per builder turn during evaluation.
    pub max_decode_steps: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optim: OptimConfig::with_epochs(20),
            max_decode_steps: 10,
        }
    }
}

impl FinetuneConfig {
    pub const KEYS: [&'static str; 13] = [
        "epochs",
        "peak_lr",
        "warmup_fraction",
        "batch_size",
        "seed",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "grad_clip",
        "max_steps",
        "wall_clock",
        "max_decode_steps",
    ];

    pub fn validate(&self) -> Result<(), TrainError> {
        self.optim.validate()?;
        if self.max_decode_steps == 0 {
            return Err(TrainError::InvalidConfig("max_decode_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        match key {
            "max_decode_steps" => Some(self.max_decode_steps.to_string()),
            _ => self.optim.get(key),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "max_decode_steps" => self.max_decode_steps = parse_value(key, value)?,
            _ if self.optim.set(key, value)? => {}
            _ => return Err(format!("unknown finetune key `{key}`")),
        }
        Ok(())
    }
}

/// Optional gradient clipping followed by one Adam update.
fn apply_update(
    model: &mut Model,
    adam: &mut AdamState<f32>,
    mut grads: ParamGrads<f32>,
    lr: f64,
    clip: f64,
) -> Result<(), TrainError> {
    if clip > 0.0 {
        let norm = grads.global_norm();
        if norm > clip {
            grads.scale((clip / norm) as f32);
        }
    }
    adam.step(model.params_mut(), &grads, lr)?;
    Ok(())
}

/// Sums per-example gradients in index order.
fn reduce_grads(n_params: usize, parts: &[ParamGrads<f32>]) -> ParamGrads<f32> {
    let mut total = ParamGrads::empty(n_params);
    for p in parts {
        total.add_assign(p);
    }
    total
}

#[cfg(test)]
mod tests;
