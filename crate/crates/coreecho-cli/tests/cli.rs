//! Black-box tests of the `coreecho` binary: exit codes, reproducibility,
//! artifact contracts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coreecho"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn coreecho")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

fn synth(dir: &Path, seed: u64) {
    let out = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        "12",
        "--size",
        "16",
        "--frames",
        "8:14",
        "--area",
        "0.10:0.16",
        "--seed",
        &seed.to_string(),
    ]);
    assert_ok(&out);
}

const TINY_TRAIN: &[&str] = &[
    "--stage1-epochs",
    "1",
    "--stage2-epochs",
    "1",
    "--clip-len",
    "4",
    "--clip-stride",
    "2",
    "--encoder-widths",
    "2,3",
    "--embed-dim",
    "8",
    "--lr",
    "1e-3",
];

#[test]
fn synth_is_reproducible_and_validates_count() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth(&a, 1);
    synth(&b, 1);
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "same seed, same dataset");

    let out = run(&["synth", "--out", tmp.path().join("c").to_str().unwrap(), "--count", "0"]);
    assert_eq!(out.status.code(), Some(2), "count 0 must be a usage error");
}

#[test]
fn train_writes_checkpoint_logs_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2);
    let outdir = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "5",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = run(&args);
    assert_ok(&out);

    assert!(outdir.join("checkpoint.crck").exists());
    assert!(outdir.join("effective-config.txt").exists());
    let log = std::fs::read_to_string(outdir.join("train-log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "stage", "loss", "val_mae", "lr"] {
        assert!(first.get(key).is_some(), "log line missing {key}");
    }
    let provenance = std::fs::read_to_string(outdir.join("effective-config.txt")).unwrap();
    assert!(provenance.contains("seed=5"));
    assert!(provenance.contains("embed_dim=8"));
}

#[test]
fn same_seed_trainings_produce_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3);
    let mut checkpoints = Vec::new();
    for name in ["r1", "r2"] {
        let outdir = tmp.path().join(name);
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            outdir.to_str().unwrap(),
            "--seed",
            "7",
        ];
        args.extend_from_slice(TINY_TRAIN);
        assert_ok(&run(&args));
        checkpoints.push(std::fs::read(outdir.join("checkpoint.crck")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
}

#[test]
fn config_file_applies_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nstage1_epochs=1\nstage2_epochs=0\nclip_len=4\nclip_stride=2\n\
         encoder_widths=2,3\nembed_dim=8\nlr=1e-3\ntau=2.0\nseed=9\n",
    )
    .unwrap();
    let outdir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--tau",
        "3.5",
    ]);
    assert_ok(&out);
    let provenance = std::fs::read_to_string(outdir.join("effective-config.txt")).unwrap();
    assert!(provenance.contains("tau=3.5"), "flag must beat config file");
    assert!(provenance.contains("seed=9"), "config file seed applies");

    let bad = std::fs::write(&cfg, "no_such_key=1\n");
    bad.unwrap();
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "unknown key is a usage error");
}

#[test]
fn eval_embed_diagnose_saliency_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5);
    let outdir = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "11",
    ];
    args.extend_from_slice(TINY_TRAIN);
    assert_ok(&run(&args));
    let ckpt = outdir.join("checkpoint.crck");

    // eval with one clip equals the single-clip path and emits metrics.
    let eval_out = tmp.path().join("eval");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--clips",
        "1",
        "--split",
        "test",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("MAE="));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["metrics"]["RMSE"].is_number());

    // embed: one row per record of the split.
    let emb_out = tmp.path().join("emb");
    let out = run(&[
        "embed",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        "all",
        "--out",
        emb_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(emb_out.join("embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13, "header plus 12 rows");
    assert!(csv.lines().next().unwrap().starts_with("id,label,e_0"));

    // diagnose emits the continuity report.
    let diag_out = tmp.path().join("diag");
    let out = run(&[
        "diagnose",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        "all",
        "--triplets",
        "2000",
        "--out",
        diag_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("triplet_violation_rate="));

    // saliency writes a vten volume per requested sample.
    let sal_out = tmp.path().join("sal");
    let out = run(&[
        "saliency",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        "test",
        "--index",
        "0",
        "--out",
        sal_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let files: Vec<_> = std::fs::read_dir(&sal_out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("saliency_") && n.ends_with(".vten"))
        .collect();
    assert_eq!(files.len(), 1);
}

#[test]
fn probe_asserts_frozen_encoder_in_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 6);
    let outdir = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
        "--seed",
        "13",
    ];
    args.extend_from_slice(TINY_TRAIN);
    assert_ok(&run(&args));

    let probe_out = tmp.path().join("probe");
    let out = run(&[
        "probe",
        "--data",
        data.to_str().unwrap(),
        "--from",
        outdir.join("checkpoint.crck").to_str().unwrap(),
        "--out",
        probe_out.to_str().unwrap(),
        "--transfer-epochs",
        "1",
        "--clip-len",
        "4",
        "--clip-stride",
        "2",
        "--lr",
        "1e-3",
        "--seed",
        "14",
    ]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("probe encoder checksum unchanged: true"),
        "{text}"
    );
    assert!(probe_out.join("checkpoint.crck").exists());
}

#[test]
fn missing_dataset_is_a_data_error_and_gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&[
        "gradcheck",
        "--out",
        tmp.path().join("gc").to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("stage1-loss-head-params"));
}

#[test]
fn seed_env_var_is_a_fallback_only() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed_flag, env) in [
        (&a, None, Some("21")),
        (&b, None, Some("21")),
        (&c, Some("22"), Some("21")),
    ] {
        let mut cmd = bin();
        cmd.args([
            "synth",
            "--out",
            dir.to_str().unwrap(),
            "--count",
            "6",
            "--size",
            "16",
            "--frames",
            "8:10",
            "--area",
            "0.10:0.14",
        ]);
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("COREECHO_SEED", e);
        }
        let out = cmd.output().unwrap();
        assert_ok(&out);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "env seed applies");
    assert_ne!(dir_bytes(&a), dir_bytes(&c), "flag beats env seed");
}
