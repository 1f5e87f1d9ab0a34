//! The hyperparameter surface of a run.

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::data::{AugmentPolicy, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, HeadTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimKind {
    AdamW,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedKind {
    Step,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L1,
    Mse,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Videos per minibatch (N); stage 1 sees 2N clips.
    pub batch_videos: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Epochs for probing / fine-tuning runs.
    pub transfer_epochs: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimKind,
    pub scheduler: SchedKind,
    pub step_size: usize,
    pub gamma: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Data-loading worker threads. A runtime execution knob: results are
    /// worker-independent by the stream-derivation contract, so it is not
    /// part of the serialized config (checkpoints stay bitwise identical
    /// across worker counts).
    #[serde(skip, default = "default_workers")]
    pub workers: usize,
    /// Z-score regression labels by train-split statistics; predictions are
    /// denormalized before metrics. Negative sets are affine-invariant, so
    /// the contrastive term is unchanged.
    pub normalize_labels: bool,
    pub precision: Precision,
}

fn default_workers() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_videos: 16,
            stage1_epochs: 25,
            stage2_epochs: 5,
            transfer_epochs: 10,
            tau: 1.0,
            lr: 1e-4,
            weight_decay: 1e-4,
            optimizer: OptimKind::AdamW,
            scheduler: SchedKind::Step,
            step_size: 15,
            gamma: 0.1,
            dropout: 0.4,
            seed: 0,
            workers: 1,
            normalize_labels: true,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_videos == 0 {
            return Err(Error::Config("batch_videos must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        // lr 0 is legal: it must leave parameters bit-identical.
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.step_size == 0 {
            return Err(Error::Config("step_size must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma {} must lie in (0, 1]",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, and everything a checkpoint snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentPolicy,
    pub encoder: EncoderConfig,
    pub task: HeadTask,
    pub loss: LossKind,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        if self.sampler.clip_len != self.encoder.clip.frames {
            return Err(Error::Config(format!(
                "sampler clip_len {} does not match encoder clip frames {}",
                self.sampler.clip_len, self.encoder.clip.frames
            )));
        }
        match (self.task, self.loss) {
            (HeadTask::Regression, LossKind::Bce) => Err(Error::Config(
                "BCE loss requires a classification task".into(),
            )),
            (HeadTask::Classification, LossKind::L1 | LossKind::Mse) => Err(Error::Config(
                "classification task requires the BCE loss".into(),
            )),
            _ => Ok(()),
        }
    }
}
