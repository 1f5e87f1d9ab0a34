//! Flat key=value configuration with flag overrides.
//!
//! Precedence: built-in defaults < config file < command-line flags. The
//! resolved surface is written to the output directory as
//! `effective-config.txt` for provenance. Unknown keys are usage errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use coreecho::autodiff::Precision;
use coreecho::data::{AugmentPolicy, Dataset, SamplerConfig};
use coreecho::model::{ClipShape, EncoderConfig, HeadTask};
use coreecho::training::{LossKind, OptimKind, PipelineConfig, SchedKind, TrainConfig};

/// Every tunable of the pipeline, flattened.
#[derive(Clone, Debug)]
pub struct Settings {
    pub train: TrainConfig,
    pub clip_len: usize,
    pub clip_stride: usize,
    pub augment: String,
    pub pad_crop_pad: usize,
    pub affine_rotate: f64,
    pub affine_scale_min: f64,
    pub affine_scale_max: f64,
    pub affine_translate: f64,
    pub encoder_widths: Vec<usize>,
    pub embed_dim: usize,
    pub temporal_stride: usize,
    pub task: String,
    pub loss: String,
    seed_explicit: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            clip_len: 36,
            clip_stride: 4,
            augment: "pad-crop".into(),
            pad_crop_pad: 6,
            affine_rotate: 20.0,
            affine_scale_min: 0.8,
            affine_scale_max: 1.1,
            affine_translate: 0.10,
            encoder_widths: vec![8, 16],
            embed_dim: 512,
            temporal_stride: 2,
            task: "regression".into(),
            loss: "l1".into(),
            seed_explicit: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| coreecho::Error::Config(format!("bad value for {key}: {e}")).into())
}

impl Settings {
    /// Apply one key=value pair; unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_videos" => self.train.batch_videos = parse(key, value)?,
            "stage1_epochs" => self.train.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => self.train.stage2_epochs = parse(key, value)?,
            "transfer_epochs" => self.train.transfer_epochs = parse(key, value)?,
            "tau" => self.train.tau = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "optimizer" => {
                self.train.optimizer = match value {
                    "adamw" => OptimKind::AdamW,
                    "sgd-momentum" => OptimKind::SgdMomentum,
                    other => bail!(coreecho::Error::Config(format!(
                        "unknown optimizer {other:?} (adamw|sgd-momentum)"
                    ))),
                }
            }
            "scheduler" => {
                self.train.scheduler = match value {
                    "step" => SchedKind::Step,
                    "none" => SchedKind::None,
                    other => bail!(coreecho::Error::Config(format!(
                        "unknown scheduler {other:?} (step|none)"
                    ))),
                }
            }
            "step_size" => self.train.step_size = parse(key, value)?,
            "gamma" => self.train.gamma = parse(key, value)?,
            "dropout" => self.train.dropout = parse(key, value)?,
            "seed" => {
                self.train.seed = parse(key, value)?;
                self.seed_explicit = true;
            }
            "workers" => self.train.workers = parse(key, value)?,
            "normalize_labels" => self.train.normalize_labels = parse(key, value)?,
            "precision" => {
                self.train.precision = match value {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    other => bail!(coreecho::Error::Config(format!(
                        "unknown precision {other:?} (f64|f32)"
                    ))),
                }
            }
            "clip_len" => self.clip_len = parse(key, value)?,
            "clip_stride" => self.clip_stride = parse(key, value)?,
            "augment" => match value {
                "none" | "pad-crop" | "affine" => self.augment = value.into(),
                other => bail!(coreecho::Error::Config(format!(
                    "unknown augment {other:?} (none|pad-crop|affine)"
                ))),
            },
            "pad_crop_pad" => self.pad_crop_pad = parse(key, value)?,
            "affine_rotate" => self.affine_rotate = parse(key, value)?,
            "affine_scale_min" => self.affine_scale_min = parse(key, value)?,
            "affine_scale_max" => self.affine_scale_max = parse(key, value)?,
            "affine_translate" => self.affine_translate = parse(key, value)?,
            "encoder_widths" => {
                self.encoder_widths = value
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "temporal_stride" => self.temporal_stride = parse(key, value)?,
            "task" => match value {
                "regression" | "classification" => self.task = value.into(),
                other => bail!(coreecho::Error::Config(format!(
                    "unknown task {other:?} (regression|classification)"
                ))),
            },
            "loss" => match value {
                "l1" | "mse" | "bce" => self.loss = value.into(),
                other => bail!(coreecho::Error::Config(format!(
                    "unknown loss {other:?} (l1|mse|bce)"
                ))),
            },
            other => bail!(coreecho::Error::Config(format!(
                "unknown configuration key {other:?}"
            ))),
        }
        Ok(())
    }

    /// Load `key=value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(coreecho::Error::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Env fallback: COREECHO_SEED applies only when no file/flag set one.
    pub fn apply_env_seed_fallback(&mut self) -> Result<()> {
        if self.seed_explicit {
            return Ok(());
        }
        if let Ok(v) = std::env::var("COREECHO_SEED") {
            self.train.seed = parse("COREECHO_SEED", &v)?;
            self.seed_explicit = true;
        }
        Ok(())
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        match self.augment.as_str() {
            "none" => AugmentPolicy::None,
            "affine" => AugmentPolicy::Affine {
                max_rotate_deg: self.affine_rotate,
                scale_min: self.affine_scale_min,
                scale_max: self.affine_scale_max,
                max_translate: self.affine_translate,
            },
            _ => AugmentPolicy::PadCrop {
                pad: self.pad_crop_pad,
            },
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            clip_len: self.clip_len,
            stride: self.clip_stride,
        }
    }

    pub fn head_task(&self) -> HeadTask {
        if self.task == "classification" {
            HeadTask::Classification
        } else {
            HeadTask::Regression
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss.as_str() {
            "mse" => LossKind::Mse,
            "bce" => LossKind::Bce,
            _ => LossKind::L1,
        }
    }

    /// Assemble the pipeline for a dataset, taking the clip geometry from
    /// its first record.
    pub fn pipeline_for(&self, dataset: &Dataset) -> Result<PipelineConfig> {
        let first = &dataset.records[0];
        let encoder = EncoderConfig {
            clip: ClipShape {
                frames: self.clip_len,
                height: first.height,
                width: first.width,
                channels: first.channels,
            },
            widths: self.encoder_widths.clone(),
            embed_dim: self.embed_dim,
            temporal_stride: self.temporal_stride,
        };
        let pipeline = PipelineConfig {
            train: self.train.clone(),
            sampler: self.sampler(),
            augment: self.augment_policy(),
            encoder,
            task: self.head_task(),
            loss: self.loss_kind(),
        };
        pipeline.validate()?;
        Ok(pipeline)
    }

    /// Sorted key=value rendering for provenance.
    pub fn to_kv_lines(&self) -> String {
        let widths = self
            .encoder_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut pairs = vec![
            ("affine_rotate".to_string(), self.affine_rotate.to_string()),
            ("affine_scale_max".into(), self.affine_scale_max.to_string()),
            ("affine_scale_min".into(), self.affine_scale_min.to_string()),
            ("affine_translate".into(), self.affine_translate.to_string()),
            ("augment".into(), self.augment.clone()),
            ("batch_videos".into(), self.train.batch_videos.to_string()),
            ("clip_len".into(), self.clip_len.to_string()),
            ("clip_stride".into(), self.clip_stride.to_string()),
            ("dropout".into(), self.train.dropout.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("encoder_widths".into(), widths),
            ("gamma".into(), self.train.gamma.to_string()),
            ("loss".into(), self.loss.clone()),
            ("lr".into(), self.train.lr.to_string()),
            (
                "normalize_labels".into(),
                self.train.normalize_labels.to_string(),
            ),
            (
                "optimizer".into(),
                match self.train.optimizer {
                    OptimKind::AdamW => "adamw".into(),
                    OptimKind::SgdMomentum => "sgd-momentum".to_string(),
                },
            ),
            ("pad_crop_pad".into(), self.pad_crop_pad.to_string()),
            (
                "precision".into(),
                match self.train.precision {
                    Precision::F64 => "f64".into(),
                    Precision::F32 => "f32".to_string(),
                },
            ),
            (
                "scheduler".into(),
                match self.train.scheduler {
                    SchedKind::Step => "step".into(),
                    SchedKind::None => "none".to_string(),
                },
            ),
            ("seed".into(), self.train.seed.to_string()),
            ("stage1_epochs".into(), self.train.stage1_epochs.to_string()),
            ("stage2_epochs".into(), self.train.stage2_epochs.to_string()),
            ("step_size".into(), self.train.step_size.to_string()),
            ("task".into(), self.task.clone()),
            ("tau".into(), self.train.tau.to_string()),
            (
                "transfer_epochs".into(),
                self.train.transfer_epochs.to_string(),
            ),
            ("weight_decay".into(), self.train.weight_decay.to_string()),
            ("workers".into(), self.train.workers.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Create the output directory and write the provenance file.
    pub fn write_provenance(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("effective-config.txt"), self.to_kv_lines())?;
        Ok(())
    }
}
