//! End-to-end training pipeline integration tests on a tiny synthetic set:
//! determinism, resumability, stage separation, and transfer mechanics.

use coreecho::data::{synth_generate, AugmentPolicy, Dataset, SamplerConfig, SynthSpec};
use coreecho::model::{ClipShape, EncoderConfig, HeadTask};
use coreecho::training::{
    finetune, load_checkpoint, probe, save_checkpoint, LossKind, PipelineConfig, TrainConfig,
    TrainingRun,
};

fn tiny_dataset(dir: &std::path::Path, seed: u64) -> Dataset {
    let spec = SynthSpec {
        count: 12,
        frames: (8, 14),
        size: 16,
        area_fraction: (0.10, 0.16),
        val_fraction: 0.25,
        test_fraction: 0.0,
        ..SynthSpec::default()
    };
    synth_generate(&spec, seed, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn tiny_pipeline(seed: u64, stage1: usize, stage2: usize) -> PipelineConfig {
    PipelineConfig {
        train: TrainConfig {
            batch_videos: 4,
            stage1_epochs: stage1,
            stage2_epochs: stage2,
            transfer_epochs: 2,
            lr: 1e-3,
            seed,
            ..TrainConfig::default()
        },
        sampler: SamplerConfig {
            clip_len: 4,
            stride: 2,
        },
        augment: AugmentPolicy::PadCrop { pad: 2 },
        encoder: EncoderConfig {
            clip: ClipShape {
                frames: 4,
                height: 16,
                width: 16,
                channels: 3,
            },
            widths: vec![2, 3],
            embed_dim: 8,
            temporal_stride: 2,
        },
        task: HeadTask::Regression,
        loss: LossKind::L1,
    }
}

fn run_to_bytes(dataset: &Dataset, pipeline: PipelineConfig, path: &std::path::Path) -> Vec<u8> {
    let mut run = TrainingRun::new(dataset, pipeline).unwrap();
    run.run(dataset, &mut |_| {}).unwrap();
    save_checkpoint(path, &run.to_checkpoint()).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn stage1_moves_both_components_and_stage2_freezes_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 1);

    let mut run = TrainingRun::new(&dataset, tiny_pipeline(7, 1, 0)).unwrap();
    let enc0 = run.model.encoder_checksum();
    let head0 = run.model.head_checksum();
    run.run(&dataset, &mut |_| {}).unwrap();
    assert_ne!(run.model.encoder_checksum(), enc0, "stage 1 must move the encoder");
    assert_ne!(run.model.head_checksum(), head0, "stage 1 must move the head");

    // Continue with stage 2 only: encoder bytes must not move at all.
    run.pipeline.train.stage2_epochs = 2;
    let enc_after_stage1 = run.model.encoder_checksum();
    let head_after_stage1 = run.model.head_checksum();
    run.run(&dataset, &mut |_| {}).unwrap();
    assert_eq!(
        run.model.encoder_checksum(),
        enc_after_stage1,
        "stage 2 touched encoder state"
    );
    assert_ne!(run.model.head_checksum(), head_after_stage1);
}

#[test]
fn fixed_seed_reruns_are_bitwise_identical_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 2);

    let a = run_to_bytes(&dataset, tiny_pipeline(11, 2, 1), &dir.path().join("a.crck"));
    let b = run_to_bytes(&dataset, tiny_pipeline(11, 2, 1), &dir.path().join("b.crck"));
    assert_eq!(a, b, "same seed, same bytes");

    let mut with_workers = tiny_pipeline(11, 2, 1);
    with_workers.train.workers = 3;
    let c = run_to_bytes(&dataset, with_workers, &dir.path().join("c.crck"));
    assert_eq!(a, c, "worker count changed the result");

    let d = run_to_bytes(&dataset, tiny_pipeline(12, 2, 1), &dir.path().join("d.crck"));
    assert_ne!(a, d, "different seeds should differ");
}

#[test]
fn checkpoint_resume_reproduces_uninterrupted_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 3);

    let oneshot = run_to_bytes(&dataset, tiny_pipeline(5, 3, 1), &dir.path().join("one.crck"));

    // First leg: stop after one stage-1 epoch.
    let mut first = TrainingRun::new(&dataset, tiny_pipeline(5, 1, 0)).unwrap();
    first.run(&dataset, &mut |_| {}).unwrap();
    let mid = dir.path().join("mid.crck");
    save_checkpoint(&mid, &first.to_checkpoint()).unwrap();

    // Second leg: extend the targets and continue.
    let loaded = load_checkpoint(&mid).unwrap();
    let mut second = TrainingRun::from_checkpoint(&loaded).unwrap();
    assert_eq!(second.progress.stage1_done, 1);
    second.pipeline.train.stage1_epochs = 3;
    second.pipeline.train.stage2_epochs = 1;
    second.run(&dataset, &mut |_| {}).unwrap();
    let resumed = dir.path().join("resumed.crck");
    save_checkpoint(&resumed, &second.to_checkpoint()).unwrap();

    assert_eq!(
        oneshot,
        std::fs::read(&resumed).unwrap(),
        "resumed run diverged from uninterrupted run"
    );
}

#[test]
fn zero_lr_leaves_parameters_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 4);
    let mut pipeline = tiny_pipeline(9, 2, 1);
    pipeline.train.lr = 0.0;
    let mut run = TrainingRun::new(&dataset, pipeline).unwrap();
    let before: Vec<(String, Vec<u8>)> = run
        .model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.to_le_bytes()))
        .collect();
    run.run(&dataset, &mut |_| {}).unwrap();
    let after: Vec<(String, Vec<u8>)> = run
        .model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.to_le_bytes()))
        .collect();
    assert_eq!(before, after);
}

#[test]
fn probe_keeps_encoder_frozen_and_finetune_moves_it() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 5);
    let mut run = TrainingRun::new(&dataset, tiny_pipeline(21, 1, 0)).unwrap();
    run.run(&dataset, &mut |_| {}).unwrap();

    let pretrained = run.model.encoder.clone();
    let pre_checksum = run.model.encoder_checksum();

    let pipeline = tiny_pipeline(33, 0, 0);
    let probed = probe(&dataset, pretrained.clone(), &pipeline, &mut |_| {}).unwrap();
    let probe_model = probed.model;
    assert_eq!(
        probe_model.encoder_checksum(),
        pre_checksum,
        "probing moved the encoder"
    );
    assert!(!probe_model.encoder.is_frozen() == false);

    let tuned = finetune(&dataset, pretrained, &pipeline, &mut |_| {}).unwrap();
    assert_ne!(
        tuned.model.encoder_checksum(),
        pre_checksum,
        "fine-tuning should move the encoder"
    );
}

#[test]
fn probe_rejects_task_label_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 6);
    let mut run = TrainingRun::new(&dataset, tiny_pipeline(2, 1, 0)).unwrap();
    run.run(&dataset, &mut |_| {}).unwrap();

    // Continuous labels with a classification task must be rejected.
    let mut bad = tiny_pipeline(2, 0, 0);
    bad.task = HeadTask::Classification;
    bad.loss = LossKind::Bce;
    let err = match probe(&dataset, run.model.encoder.clone(), &bad, &mut |_| {}) {
        Err(e) => e,
        Ok(_) => panic!("expected a configuration error"),
    };
    assert!(err.to_string().contains("non-binary"));
}

#[test]
fn training_logs_record_losses_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(&dir.path().join("data"), 7);
    let mut lines = Vec::new();
    let mut run = TrainingRun::new(&dataset, tiny_pipeline(13, 2, 1)).unwrap();
    run.run(&dataset, &mut |l| lines.push(l.clone())).unwrap();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].stage, "stage1");
    assert_eq!(lines[2].stage, "stage2");
    assert!(lines.iter().all(|l| l.loss.is_finite()));
    assert!(lines.iter().all(|l| l.val_mae.is_some()));
    // JSON-lines schema sanity.
    let json = serde_json::to_value(&lines[0]).unwrap();
    for key in ["stage", "epoch", "loss", "val_mae", "lr"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}
