//! Single-binary pipeline driver.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data error,
//! 4 check failure (gradient or freeze assertions).

mod commands;
mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "coreecho",
    version,
    about = "Two-stage contrastive-regression training for video labels at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pulsating-ellipse dataset.
    Synth(SynthArgs),
    /// Run first-stage (contrastive + L1) then second-stage (head
    /// refinement) training.
    Train(TrainArgs),
    /// Train a fresh head on a frozen pretrained encoder.
    Probe(TransferArgs),
    /// Update encoder and a fresh head on a target task.
    Finetune(TransferArgs),
    /// Evaluate a checkpoint with multi-clip averaged inference.
    Eval(EvalArgs),
    /// Export per-video embeddings as CSV.
    Embed(EmbedArgs),
    /// Embedding-continuity diagnostics (triplet violations, kNN label MAE).
    Diagnose(DiagnoseArgs),
    /// Finite-difference verification of every gradient path.
    Gradcheck(GradcheckArgs),
    /// Export an input-gradient saliency volume for one video.
    Saliency(SaliencyArgs),
}

/// Hyperparameter overrides; flags win over the config file.
#[derive(Args, Clone, Default)]
pub struct HyperFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch_videos: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    transfer_epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long)]
    clip_stride: Option<usize>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    pad_crop_pad: Option<usize>,
    #[arg(long)]
    encoder_widths: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    temporal_stride: Option<usize>,
    #[arg(long)]
    normalize_labels: Option<bool>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    loss: Option<String>,
}

impl HyperFlags {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("seed", self.seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("batch_videos", self.batch_videos.map(|v| v.to_string())),
            ("stage1_epochs", self.stage1_epochs.map(|v| v.to_string())),
            ("stage2_epochs", self.stage2_epochs.map(|v| v.to_string())),
            (
                "transfer_epochs",
                self.transfer_epochs.map(|v| v.to_string()),
            ),
            ("tau", self.tau.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("optimizer", self.optimizer.clone()),
            ("scheduler", self.scheduler.clone()),
            ("step_size", self.step_size.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("clip_len", self.clip_len.map(|v| v.to_string())),
            ("clip_stride", self.clip_stride.map(|v| v.to_string())),
            ("augment", self.augment.clone()),
            ("pad_crop_pad", self.pad_crop_pad.map(|v| v.to_string())),
            ("encoder_widths", self.encoder_widths.clone()),
            ("embed_dim", self.embed_dim.map(|v| v.to_string())),
            (
                "temporal_stride",
                self.temporal_stride.map(|v| v.to_string()),
            ),
            (
                "normalize_labels",
                self.normalize_labels.map(|v| v.to_string()),
            ),
            ("precision", self.precision.clone()),
            ("task", self.task.clone()),
            ("loss", self.loss.clone()),
        ]
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Total video count; split into train/val/test by the fractions.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Frame-count range, inclusive, as LO:HI.
    #[arg(long, default_value = "40:80")]
    frames: String,
    /// Square frame side.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Label range as LO:HI (percent units).
    #[arg(long, default_value = "10:80")]
    labels: String,
    /// Ellipse axis-ratio range as LO:HI.
    #[arg(long, default_value = "0.85:1.15")]
    ecc: String,
    /// Diastolic area fraction range as LO:HI.
    #[arg(long, default_value = "0.18:0.26")]
    area: String,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    val_frac: f64,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    test_frac: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (manifest.csv plus .vten files).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint (epoch targets may be extended by flags).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    hp: HyperFlags,
}

#[derive(Args)]
pub struct TransferArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint supplying the encoder.
    #[arg(long)]
    from: PathBuf,
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    hp: HyperFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    /// Clips averaged per video.
    #[arg(long, default_value_t = 3)]
    clips: usize,
    /// train | val | test | all
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 20_000)]
    triplets: usize,
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Max relative error allowed.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "coreecho-out")]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Record indices within the split.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    index: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<coreecho::Error>() {
        return match e {
            coreecho::Error::Config(_) => 2,
            coreecho::Error::Data(_)
            | coreecho::Error::Io(_)
            | coreecho::Error::Csv(_)
            | coreecho::Error::Json(_)
            | coreecho::Error::Checkpoint(_) => 3,
            coreecho::Error::GradCheck(_) => 4,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::cmd_synth(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Probe(args) => commands::cmd_transfer(args, false),
        Command::Finetune(args) => commands::cmd_transfer(args, true),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Embed(args) => commands::cmd_embed(args),
        Command::Diagnose(args) => commands::cmd_diagnose(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
        Command::Saliency(args) => commands::cmd_saliency(args),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code_for(&err));
        }
    }
}
