//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coreecho::data::{
    read_manifest, sample_clip, synth_generate, write_vten, Dataset, Split, SynthSpec,
    VideoRecord,
};
use coreecho::evaluation::{
    embed_records, evaluate_split, export_embeddings, input_saliency, knn_label_mae,
    triplet_violation_rate, ContinuityReport, MetricReport,
};
use coreecho::model::ClipShape;
use coreecho::training::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, transfer_with_optimizers, LogLine,
    PipelineConfig, TrainingRun,
};
use coreecho::verify::full_gradient_suite;

use crate::settings::Settings;
use crate::{
    DiagnoseArgs, EmbedArgs, EvalArgs, GradcheckArgs, HyperFlags, SaliencyArgs, SynthArgs,
    TrainArgs, TransferArgs,
};

fn resolve_settings(config: &Option<PathBuf>, hp: &HyperFlags) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = config {
        s.apply_file(path)?;
    }
    for (key, value) in hp.overrides() {
        if let Some(v) = value {
            s.set(key, &v)?;
        }
    }
    s.apply_env_seed_fallback()?;
    Ok(s)
}

fn parse_range_f64(text: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 2 {
        bail!(coreecho::Error::Config(format!(
            "{what} must be LO:HI, got {text:?}"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| coreecho::Error::Config(format!("{what}: bad number {:?}", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| coreecho::Error::Config(format!("{what}: bad number {:?}", parts[1])))?;
    Ok((lo, hi))
}

fn parse_range_usize(text: &str, what: &str) -> Result<(usize, usize)> {
    let (lo, hi) = parse_range_f64(text, what)?;
    Ok((lo as usize, hi as usize))
}

fn env_seed_or(seed: Option<u64>) -> u64 {
    seed.or_else(|| {
        std::env::var("COREECHO_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn split_records<'a>(dataset: &'a Dataset, split: &str) -> Result<Vec<&'a VideoRecord>> {
    let records = match split {
        "train" => dataset.split(Split::Train),
        "val" => dataset.split(Split::Val),
        "test" => dataset.split(Split::Test),
        "all" => dataset.records.iter().collect(),
        other => bail!(coreecho::Error::Config(format!(
            "unknown split {other:?} (train|val|test|all)"
        ))),
    };
    if records.is_empty() {
        bail!(coreecho::Error::Data(format!(
            "split {split:?} has no records"
        )));
    }
    Ok(records)
}

fn write_log_lines(path: &Path, lines: &[LogLine]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut f, line)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn print_log_line(line: &LogLine) {
    let val = match (line.val_mae, line.val_f1) {
        (Some(m), _) => format!(" val_mae={m:.4}"),
        (_, Some(f)) => format!(" val_f1={f:.4}"),
        _ => String::new(),
    };
    println!(
        "[{}] epoch {} loss={:.6}{} lr={:.2e}",
        line.stage, line.epoch, line.loss, val, line.lr
    );
}

fn report_outputs(out: &Path, report: &MetricReport) -> Result<()> {
    print!("{}", report.to_kv_lines());
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report.to_json())?,
    )?;
    Ok(())
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        count: args.count,
        frames: parse_range_usize(&args.frames, "--frames")?,
        size: args.size,
        label_range: parse_range_f64(&args.labels, "--labels")?,
        eccentricity: parse_range_f64(&args.ecc, "--ecc")?,
        area_fraction: parse_range_f64(&args.area, "--area")?,
        val_fraction: args.val_frac,
        test_fraction: args.test_frac,
    };
    let seed = env_seed_or(args.seed);
    let manifest = synth_generate(&spec, seed, &args.out)?;
    let rows = read_manifest(&manifest)?;
    println!("manifest={}", manifest.display());
    println!("count={} seed={seed}", rows.len());

    // Label histogram over ten equal bins.
    let (lo, hi) = spec.label_range;
    let width = ((hi - lo) / 10.0).max(1e-9);
    let mut bins = [0usize; 10];
    for r in &rows {
        let b = (((r.label - lo) / width) as usize).min(9);
        bins[b] += 1;
    }
    for (i, count) in bins.iter().enumerate() {
        let l = lo + i as f64 * width;
        println!("hist[{:5.1}..{:5.1}]={count}", l, l + width);
    }
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = resolve_settings(&args.config, &args.hp)?;
    settings.write_provenance(&args.out)?;
    let dataset =
        Dataset::load(&args.data).with_context(|| format!("loading {}", args.data.display()))?;

    let mut run = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut run = TrainingRun::from_checkpoint(&ckpt)?;
            run.pipeline.train.workers = settings.train.workers;
            if let Some(e) = args.hp.stage1_epochs {
                run.pipeline.train.stage1_epochs = e;
            }
            if let Some(e) = args.hp.stage2_epochs {
                run.pipeline.train.stage2_epochs = e;
            }
            println!(
                "resumed from {} at stage1={} stage2={}",
                path.display(),
                run.progress.stage1_done,
                run.progress.stage2_done
            );
            run
        }
        None => TrainingRun::new(&dataset, settings.pipeline_for(&dataset)?)?,
    };

    run.run(&dataset, &mut print_log_line)?;
    write_log_lines(&args.out.join("train-log.jsonl"), &run.log)?;

    let ckpt_path = args.out.join("checkpoint.crck");
    save_checkpoint(&ckpt_path, &run.to_checkpoint())?;

    if let Some(best) = run
        .log
        .iter()
        .filter_map(|l| l.val_mae.map(|m| (m, l.stage.clone(), l.epoch)))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
    {
        println!("best_val_mae={:.4} at {} epoch {}", best.0, best.1, best.2);
    }
    println!("encoder_checksum={:016x}", run.model.encoder_checksum());
    println!("head_checksum={:016x}", run.model.head_checksum());
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

pub fn cmd_transfer(args: TransferArgs, fine_tune: bool) -> Result<()> {
    let settings = resolve_settings(&args.config, &args.hp)?;
    settings.write_provenance(&args.out)?;
    let dataset = Dataset::load(&args.data)?;
    let ckpt = load_checkpoint(&args.from)?;
    let pretrained = model_from_checkpoint(&ckpt)?;
    let mut encoder = pretrained.encoder;

    // Retarget the clip geometry to the transfer dataset; conv weights and
    // pooling are geometry-agnostic, only the channel count must agree.
    let first = &dataset.records[0];
    if encoder.cfg.clip.channels != first.channels {
        bail!(coreecho::Error::Config(format!(
            "checkpoint encoder expects {} channels, dataset has {}",
            encoder.cfg.clip.channels, first.channels
        )));
    }
    encoder.cfg.clip = ClipShape {
        frames: settings.clip_len,
        height: first.height,
        width: first.width,
        channels: first.channels,
    };

    let pipeline = PipelineConfig {
        train: settings.train.clone(),
        sampler: settings.sampler(),
        augment: settings.augment_policy(),
        encoder: encoder.cfg.clone(),
        task: settings.head_task(),
        loss: settings.loss_kind(),
    };
    pipeline.validate()?;

    let before = encoder.state_checksum();
    let (outcome, enc_opt, head_opt) =
        transfer_with_optimizers(&dataset, encoder, &pipeline, fine_tune, &mut print_log_line)?;
    let after = outcome.model.encoder.state_checksum();

    if fine_tune {
        println!("encoder_checksum_before={before:016x} after={after:016x}");
    } else {
        println!(
            "probe encoder checksum unchanged: {} ({before:016x})",
            before == after
        );
        if before != after {
            bail!(coreecho::Error::GradCheck(
                "probing moved encoder state".into()
            ));
        }
    }

    write_log_lines(&args.out.join("train-log.jsonl"), &outcome.log)?;
    let ckpt_path = args.out.join("checkpoint.crck");
    save_checkpoint(
        &ckpt_path,
        &outcome.to_checkpoint(&pipeline, enc_opt.as_ref(), &head_opt),
    )?;
    println!("checkpoint={}", ckpt_path.display());

    // Final report on the test split when present, validation otherwise.
    let records = if !dataset.split(Split::Test).is_empty() {
        dataset.split(Split::Test)
    } else if !dataset.split(Split::Val).is_empty() {
        dataset.split(Split::Val)
    } else {
        dataset.split(Split::Train)
    };
    let report = evaluate_split(
        &outcome.model,
        &records,
        &pipeline.sampler,
        3,
        settings.train.seed,
        outcome.label_norm.as_ref(),
    )?;
    report_outputs(&args.out, &report)?;
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = model_from_checkpoint(&ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let records = split_records(&dataset, &args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let seed = env_seed_or(args.seed);
    let report = evaluate_split(
        &model,
        &records,
        &ckpt.config.sampler,
        args.clips,
        seed,
        ckpt.label_norm.as_ref(),
    )?;
    println!("split={} clips={} seed={seed}", args.split, args.clips);
    report_outputs(&args.out, &report)?;
    Ok(())
}

pub fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = model_from_checkpoint(&ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let records = split_records(&dataset, &args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let seed = env_seed_or(args.seed);
    let path = args.out.join("embeddings.csv");
    let rows = export_embeddings(&model, &records, &ckpt.config.sampler, seed, &path)?;
    println!("rows={rows} path={}", path.display());
    Ok(())
}

pub fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = model_from_checkpoint(&ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let records = split_records(&dataset, &args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let seed = env_seed_or(args.seed);
    let (_, labels, embeddings) = embed_records(&model, &records, &ckpt.config.sampler, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = triplet_violation_rate(&embeddings, &labels, args.triplets, &mut rng)?;
    let knn = knn_label_mae(&embeddings, &labels, args.knn_k)?;
    let report = ContinuityReport {
        triplet_violation_rate: rate,
        knn_label_mae: knn,
        n_triplets: args.triplets,
        k: args.knn_k,
    };
    print!("{}", report.to_kv_lines());
    std::fs::write(
        args.out.join("continuity.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let entries = full_gradient_suite(args.step, args.tolerance)?;
    let mut failures = Vec::new();
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:28} max_rel_err={:.3e}",
            e.name,
            e.report.max_rel_err()
        );
        if !e.passed() {
            failures.push(format!(
                "{}: {:.3e}",
                e.name,
                e.report.max_rel_err()
            ));
        }
    }
    println!(
        "checked={} tolerance={:.1e} step={:.1e}",
        entries.len(),
        args.tolerance,
        args.step
    );
    if !failures.is_empty() {
        bail!(coreecho::Error::GradCheck(failures.join("; ")));
    }
    Ok(())
}

pub fn cmd_saliency(args: SaliencyArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = model_from_checkpoint(&ckpt)?;
    let dataset = Dataset::load(&args.data)?;
    let records = split_records(&dataset, &args.split)?;
    std::fs::create_dir_all(&args.out)?;
    let seed = env_seed_or(args.seed);
    for &idx in &args.index {
        let Some(record) = records.get(idx) else {
            bail!(coreecho::Error::Data(format!(
                "index {idx} out of range for split of {} records",
                records.len()
            )));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37));
        let clip = sample_clip(record, &ckpt.config.sampler, &mut rng);
        let map = input_saliency(&model, &clip)?;
        // Quantize the [0,1] magnitude volume for visualization tooling.
        let bytes: Vec<u8> = map
            .data()
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let shape = map.shape();
        let path = args.out.join(format!("saliency_{}.vten", record.id));
        write_vten(&path, shape[0], shape[1], shape[2], shape[3], &bytes)?;
        println!("id={} path={}", record.id, path.display());
    }
    Ok(())
}
