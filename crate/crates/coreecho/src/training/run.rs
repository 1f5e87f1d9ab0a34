//! Two-stage training orchestration plus probing and fine-tuning.
//!
//! Every random draw comes from a stream derived from (seed, purpose tag,
//! stage, epoch, index), so runs are bitwise reproducible, resumable at
//! epoch boundaries, and independent of data-worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::data::{build_clip_batch, build_stage1_batch, Dataset, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, LabelNorm};
use crate::losses::{bce_loss, l1_loss, mse_loss, stage1_loss, stage2_loss};
use crate::model::{Bindings, CoReEchoModel, HeadTask, Parameter, RegressionHead, TinyEncoder};
use crate::util::mix_seed;

use super::checkpoint::{Checkpoint, TrainProgress};
use super::config::{LossKind, PipelineConfig, SchedKind};
use super::optim::{step_lr, Optimizer};

const SHUFFLE_TAG: u64 = 0x5481;
const ROW_TAG: u64 = 0x4301;
const DROPOUT_TAG: u64 = 0xD409;
const VAL_TAG: u64 = 0x07A1;
const HEAD_INIT_TAG: u64 = 0x6EAD;

const STAGE1: u64 = 1;
const STAGE2: u64 = 2;
const STAGE_PROBE: u64 = 3;
const STAGE_FINETUNE: u64 = 4;

/// One JSON-lines log record.
#[derive(Clone, Debug, Serialize)]
pub struct LogLine {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_mae: Option<f64>,
    pub val_f1: Option<f64>,
    pub lr: f64,
}

fn collect_grads(bindings: &Bindings, params: &[&Parameter]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| {
            let g = bindings
                .grad_or_zeros(&p.name)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (p.name.clone(), g)
        })
        .collect()
}

fn shuffled_train<'a>(
    dataset: &'a Dataset,
    seed: u64,
    stage: u64,
    epoch: usize,
) -> Result<Vec<&'a VideoRecord>> {
    let mut records = dataset.split(Split::Train);
    if records.is_empty() {
        return Err(Error::Data("no training videos in dataset".into()));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SHUFFLE_TAG, stage, epoch as u64]));
    records.shuffle(&mut rng);
    Ok(records)
}

fn validation_line(
    model: &CoReEchoModel,
    dataset: &Dataset,
    pipeline: &PipelineConfig,
    norm: Option<&LabelNorm>,
    stage: u64,
    epoch: usize,
) -> (Option<f64>, Option<f64>) {
    let val = dataset.split(Split::Val);
    if val.is_empty() {
        return (None, None);
    }
    let seed = mix_seed(&[pipeline.train.seed, VAL_TAG, stage, epoch as u64]);
    match evaluate_split(model, &val, &pipeline.sampler, 1, seed, norm) {
        Ok(report) => match model.head.task {
            HeadTask::Regression => (report.get("MAE"), None),
            HeadTask::Classification => (None, report.get("F1")),
        },
        Err(_) => (None, None),
    }
}

/// A resumable training run: model, optimizers, label normalization, and the
/// progress cursor.
pub struct TrainingRun {
    pub pipeline: PipelineConfig,
    pub model: CoReEchoModel,
    pub encoder_opt: Optimizer,
    pub head_opt: Optimizer,
    pub label_norm: Option<LabelNorm>,
    pub progress: TrainProgress,
    pub log: Vec<LogLine>,
}

impl TrainingRun {
    pub fn new(dataset: &Dataset, pipeline: PipelineConfig) -> Result<Self> {
        pipeline.validate()?;
        let train = &pipeline.train;
        let model = CoReEchoModel::init(
            pipeline.encoder.clone(),
            train.dropout,
            pipeline.task,
            train.seed,
        )?;
        let label_norm = if train.normalize_labels && pipeline.task == HeadTask::Regression {
            let (mean, sd) = dataset.label_stats(Split::Train);
            Some(LabelNorm { mean, sd })
        } else {
            None
        };
        let encoder_opt =
            Optimizer::new(train.optimizer, "optim.encoder", train.lr, train.weight_decay);
        let head_opt = Optimizer::new(train.optimizer, "optim.head", train.lr, train.weight_decay);
        Ok(Self {
            pipeline,
            model,
            encoder_opt,
            head_opt,
            label_norm,
            progress: TrainProgress::default(),
            log: Vec::new(),
        })
    }

    /// Rebuild a run from a checkpoint; the stored config is authoritative
    /// except that epoch targets may be extended by the caller afterwards.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let train = &ckpt.config.train;
        let mut model = CoReEchoModel::init(
            ckpt.config.encoder.clone(),
            train.dropout,
            ckpt.config.task,
            train.seed,
        )?;
        model.load_state(&ckpt.tensors)?;
        let mut encoder_opt =
            Optimizer::new(train.optimizer, "optim.encoder", train.lr, train.weight_decay);
        encoder_opt.load_state(&ckpt.tensors)?;
        let mut head_opt =
            Optimizer::new(train.optimizer, "optim.head", train.lr, train.weight_decay);
        head_opt.load_state(&ckpt.tensors)?;
        Ok(Self {
            pipeline: ckpt.config.clone(),
            model,
            encoder_opt,
            head_opt,
            label_norm: ckpt.label_norm,
            progress: ckpt.progress,
            log: Vec::new(),
        })
    }

    fn normalize(&self, labels: &[f64]) -> Vec<f64> {
        match &self.label_norm {
            Some(n) => labels.iter().map(|y| n.normalize(*y)).collect(),
            None => labels.to_vec(),
        }
    }

    /// Run outstanding stage-1 then stage-2 epochs.
    pub fn run(&mut self, dataset: &Dataset, on_log: &mut dyn FnMut(&LogLine)) -> Result<()> {
        while self.progress.stage1_done < self.pipeline.train.stage1_epochs {
            let line = self.stage1_epoch(dataset)?;
            on_log(&line);
            self.log.push(line);
        }
        if self.pipeline.train.stage2_epochs > 0 {
            self.model.encoder.set_trainable(false);
            while self.progress.stage2_done < self.pipeline.train.stage2_epochs {
                let line = self.stage2_epoch(dataset)?;
                on_log(&line);
                self.log.push(line);
            }
        }
        Ok(())
    }

    /// One joint representation+head epoch over shuffled dual-clip batches.
    fn stage1_epoch(&mut self, dataset: &Dataset) -> Result<LogLine> {
        let cfg = self.pipeline.clone();
        let train = &cfg.train;
        let epoch = self.progress.stage1_done;
        let order = shuffled_train(dataset, train.seed, STAGE1, epoch)?;
        let lr = match train.scheduler {
            SchedKind::Step => step_lr(train.lr, epoch, train.step_size, train.gamma),
            SchedKind::None => train.lr,
        };
        self.encoder_opt.set_lr(lr);
        self.head_opt.set_lr(lr);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(train.batch_videos).enumerate() {
            let base_row = 2 * bi * train.batch_videos;
            let row_seeds: Vec<u64> = (0..2 * chunk.len())
                .map(|r| {
                    mix_seed(&[
                        train.seed,
                        ROW_TAG,
                        STAGE1,
                        epoch as u64,
                        (base_row + r) as u64,
                    ])
                })
                .collect();
            let batch =
                build_stage1_batch(chunk, &cfg.sampler, &cfg.augment, &row_seeds, train.workers)?;
            let labels = self.normalize(&batch.labels);

            let tape = Tape::with_precision(train.precision);
            let mut bindings = Bindings::new();
            let x = tape.constant(batch.clips);
            let embeddings = self.model.encoder.forward_train(&tape, &mut bindings, &x)?;
            let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                train.seed,
                DROPOUT_TAG,
                STAGE1,
                epoch as u64,
                bi as u64,
            ]));
            let parts = stage1_loss(
                &embeddings,
                &labels,
                train.tau,
                &mut self.model.head,
                &mut bindings,
                &mut drop_rng,
            )?;
            parts.total.backward()?;

            let enc_grads = collect_grads(&bindings, &self.model.encoder.params());
            let head_grads = collect_grads(&bindings, &self.model.head.params());
            self.encoder_opt
                .step(&mut self.model.encoder.params_mut(), &enc_grads)?;
            self.head_opt
                .step(&mut self.model.head.params_mut(), &head_grads)?;

            epoch_loss += parts.total.item();
            batches += 1;
        }

        self.progress.stage1_done += 1;
        let (val_mae, val_f1) = validation_line(
            &self.model,
            dataset,
            &cfg,
            self.label_norm.as_ref(),
            STAGE1,
            epoch,
        );
        Ok(LogLine {
            stage: "stage1".into(),
            epoch: epoch + 1,
            loss: epoch_loss / batches.max(1) as f64,
            val_mae,
            val_f1,
            lr,
        })
    }

    /// One frozen-encoder refinement epoch: single clip per video, L1 on the
    /// head only, constant base learning rate.
    fn stage2_epoch(&mut self, dataset: &Dataset) -> Result<LogLine> {
        let cfg = self.pipeline.clone();
        let train = &cfg.train;
        let epoch = self.progress.stage2_done;
        let order = shuffled_train(dataset, train.seed, STAGE2, epoch)?;
        let lr = train.lr;
        self.head_opt.set_lr(lr);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(train.batch_videos).enumerate() {
            if chunk.len() < 2 {
                // Train-mode batch norm is undefined on singleton batches.
                continue;
            }
            let base_row = bi * train.batch_videos;
            let row_seeds: Vec<u64> = (0..chunk.len())
                .map(|r| {
                    mix_seed(&[
                        train.seed,
                        ROW_TAG,
                        STAGE2,
                        epoch as u64,
                        (base_row + r) as u64,
                    ])
                })
                .collect();
            let batch =
                build_clip_batch(chunk, &cfg.sampler, &cfg.augment, &row_seeds, train.workers)?;
            let labels = self.normalize(&batch.labels);

            let tape = Tape::with_precision(train.precision);
            let mut bindings = Bindings::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                train.seed,
                DROPOUT_TAG,
                STAGE2,
                epoch as u64,
                bi as u64,
            ]));
            let (loss, _) = stage2_loss(
                &batch.clips,
                &labels,
                &self.model.encoder,
                &mut self.model.head,
                &tape,
                &mut bindings,
                &mut drop_rng,
            )?;
            loss.backward()?;

            let head_grads = collect_grads(&bindings, &self.model.head.params());
            self.head_opt
                .step(&mut self.model.head.params_mut(), &head_grads)?;

            epoch_loss += loss.item();
            batches += 1;
        }

        self.progress.stage2_done += 1;
        let (val_mae, val_f1) = validation_line(
            &self.model,
            dataset,
            &cfg,
            self.label_norm.as_ref(),
            STAGE2,
            epoch,
        );
        Ok(LogLine {
            stage: "stage2".into(),
            epoch: epoch + 1,
            loss: epoch_loss / batches.max(1) as f64,
            val_mae,
            val_f1,
            lr,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.state_entries();
        tensors.extend(self.encoder_opt.state_entries());
        tensors.extend(self.head_opt.state_entries());
        Checkpoint {
            config: self.pipeline.clone(),
            label_norm: self.label_norm,
            progress: self.progress,
            tensors,
        }
    }
}

/// Rebuild just the model from a checkpoint (no optimizer state).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<CoReEchoModel> {
    let mut model = CoReEchoModel::init(
        ckpt.config.encoder.clone(),
        ckpt.config.train.dropout,
        ckpt.config.task,
        ckpt.config.train.seed,
    )?;
    model.load_state(&ckpt.tensors)?;
    Ok(model)
}

/// Result of a probing or fine-tuning run.
pub struct TransferOutcome {
    pub model: CoReEchoModel,
    pub log: Vec<LogLine>,
    pub label_norm: Option<LabelNorm>,
}

impl TransferOutcome {
    pub fn to_checkpoint(
        &self,
        pipeline: &PipelineConfig,
        encoder_opt: Option<&Optimizer>,
        head_opt: &Optimizer,
    ) -> Checkpoint {
        let mut tensors = self.model.state_entries();
        if let Some(opt) = encoder_opt {
            tensors.extend(opt.state_entries());
        }
        tensors.extend(head_opt.state_entries());
        Checkpoint {
            config: pipeline.clone(),
            label_norm: self.label_norm,
            progress: TrainProgress {
                stage1_done: 0,
                stage2_done: 0,
                transfer_done: self.log.len(),
            },
            tensors,
        }
    }
}

fn check_task_matches_dataset(dataset: &Dataset, pipeline: &PipelineConfig) -> Result<()> {
    let binary = dataset.is_binary();
    match pipeline.task {
        HeadTask::Classification if !binary => Err(Error::Config(
            "classification task on a manifest with non-binary labels".into(),
        )),
        HeadTask::Regression if binary => Err(Error::Config(
            "regression loss on a classification (binary-label) manifest".into(),
        )),
        _ => Ok(()),
    }
}

struct TransferEngine<'a> {
    dataset: &'a Dataset,
    pipeline: &'a PipelineConfig,
    stage_tag: u64,
    stage_name: &'static str,
    trainable_encoder: bool,
}

impl TransferEngine<'_> {
    fn run(
        &self,
        mut encoder: TinyEncoder,
        on_log: &mut dyn FnMut(&LogLine),
    ) -> Result<(TransferOutcome, Option<Optimizer>, Optimizer)> {
        let cfg = self.pipeline;
        cfg.validate()?;
        check_task_matches_dataset(self.dataset, cfg)?;
        let train = &cfg.train;
        if encoder.embed_dim() != cfg.encoder.embed_dim {
            return Err(Error::Config(format!(
                "encoder embedding width {} does not match config {}",
                encoder.embed_dim(),
                cfg.encoder.embed_dim
            )));
        }
        encoder.set_trainable(self.trainable_encoder);
        let head = RegressionHead::init(
            encoder.embed_dim(),
            train.dropout,
            cfg.task,
            mix_seed(&[train.seed, HEAD_INIT_TAG]),
        )?;
        let mut model = CoReEchoModel { encoder, head };
        let label_norm = if train.normalize_labels && cfg.task == HeadTask::Regression {
            let (mean, sd) = self.dataset.label_stats(Split::Train);
            Some(LabelNorm { mean, sd })
        } else {
            None
        };
        let mut encoder_opt = self.trainable_encoder.then(|| {
            Optimizer::new(train.optimizer, "optim.encoder", train.lr, train.weight_decay)
        });
        let mut head_opt =
            Optimizer::new(train.optimizer, "optim.head", train.lr, train.weight_decay);

        let mut log = Vec::new();
        for epoch in 0..train.transfer_epochs {
            let order = shuffled_train(self.dataset, train.seed, self.stage_tag, epoch)?;
            let lr = train.lr;
            head_opt.set_lr(lr);
            if let Some(opt) = encoder_opt.as_mut() {
                opt.set_lr(lr);
            }
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (bi, chunk) in order.chunks(train.batch_videos).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let base_row = bi * train.batch_videos;
                let row_seeds: Vec<u64> = (0..chunk.len())
                    .map(|r| {
                        mix_seed(&[
                            train.seed,
                            ROW_TAG,
                            self.stage_tag,
                            epoch as u64,
                            (base_row + r) as u64,
                        ])
                    })
                    .collect();
                let batch = build_clip_batch(
                    chunk,
                    &cfg.sampler,
                    &cfg.augment,
                    &row_seeds,
                    train.workers,
                )?;
                let raw_labels = batch.labels.clone();
                let labels: Vec<f64> = match (&label_norm, cfg.loss) {
                    (Some(n), LossKind::L1 | LossKind::Mse) => {
                        raw_labels.iter().map(|y| n.normalize(*y)).collect()
                    }
                    _ => raw_labels.clone(),
                };

                let tape = Tape::with_precision(train.precision);
                let mut bindings = Bindings::new();
                let x = tape.constant(batch.clips);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    train.seed,
                    DROPOUT_TAG,
                    self.stage_tag,
                    epoch as u64,
                    bi as u64,
                ]));
                let embeddings = if self.trainable_encoder {
                    model.encoder.forward_train(&tape, &mut bindings, &x)?
                } else {
                    model
                        .encoder
                        .forward_eval(&tape, &mut bindings, &x)?
                        .stop_gradient()
                };
                let preds =
                    model
                        .head
                        .forward_train(&tape, &mut bindings, &embeddings, &mut drop_rng)?;
                let target = tape.constant(Tensor::from_vec(labels.clone()));
                let loss = match cfg.loss {
                    LossKind::L1 => l1_loss(&preds, &target)?,
                    LossKind::Mse => mse_loss(&preds, &target)?,
                    LossKind::Bce => bce_loss(&preds, &labels)?,
                };
                loss.backward()?;

                if let Some(opt) = encoder_opt.as_mut() {
                    let grads = collect_grads(&bindings, &model.encoder.params());
                    opt.step(&mut model.encoder.params_mut(), &grads)?;
                }
                let head_grads = collect_grads(&bindings, &model.head.params());
                head_opt.step(&mut model.head.params_mut(), &head_grads)?;

                epoch_loss += loss.item();
                batches += 1;
            }

            let (val_mae, val_f1) = validation_line(
                &model,
                self.dataset,
                cfg,
                label_norm.as_ref(),
                self.stage_tag,
                epoch,
            );
            let line = LogLine {
                stage: self.stage_name.into(),
                epoch: epoch + 1,
                loss: epoch_loss / batches.max(1) as f64,
                val_mae,
                val_f1,
                lr,
            };
            on_log(&line);
            log.push(line);
        }
        Ok((
            TransferOutcome {
                model,
                log,
                label_norm,
            },
            encoder_opt,
            head_opt,
        ))
    }
}

/// Train a fresh head on a frozen pretrained encoder.
pub fn probe(
    dataset: &Dataset,
    encoder: TinyEncoder,
    pipeline: &PipelineConfig,
    on_log: &mut dyn FnMut(&LogLine),
) -> Result<TransferOutcome> {
    let engine = TransferEngine {
        dataset,
        pipeline,
        stage_tag: STAGE_PROBE,
        stage_name: "probe",
        trainable_encoder: false,
    };
    engine.run(encoder, on_log).map(|(out, _, _)| out)
}

/// Update both the encoder and a fresh head on the target task.
pub fn finetune(
    dataset: &Dataset,
    encoder: TinyEncoder,
    pipeline: &PipelineConfig,
    on_log: &mut dyn FnMut(&LogLine),
) -> Result<TransferOutcome> {
    let engine = TransferEngine {
        dataset,
        pipeline,
        stage_tag: STAGE_FINETUNE,
        stage_name: "finetune",
        trainable_encoder: true,
    };
    engine.run(encoder, on_log).map(|(out, _, _)| out)
}

/// Probe/finetune and also return the optimizer state for checkpointing.
pub fn transfer_with_optimizers(
    dataset: &Dataset,
    encoder: TinyEncoder,
    pipeline: &PipelineConfig,
    fine_tune: bool,
    on_log: &mut dyn FnMut(&LogLine),
) -> Result<(TransferOutcome, Option<Optimizer>, Optimizer)> {
    let engine = TransferEngine {
        dataset,
        pipeline,
        stage_tag: if fine_tune { STAGE_FINETUNE } else { STAGE_PROBE },
        stage_name: if fine_tune { "finetune" } else { "probe" },
        trainable_encoder: fine_tune,
    };
    engine.run(encoder, on_log)
}
