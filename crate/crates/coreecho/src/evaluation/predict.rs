//! Multi-clip averaged inference, split evaluation, and embedding export.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, regression_metrics, MetricReport};
use crate::autodiff::{Tape, Tensor};
use crate::data::{sample_clip, SamplerConfig, VideoRecord};
use crate::error::{Error, Result};
use crate::model::{Bindings, CoReEchoModel, HeadTask};
use crate::util::mix_seed;

const EVAL_STREAM_TAG: u64 = 0xE7A1;
const EMBED_STREAM_TAG: u64 = 0xE3BD;

/// Affine label normalization fixed from a training split; predictions are
/// mapped back to label units before metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub mean: f64,
    pub sd: f64,
}

impl LabelNorm {
    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn denormalize(&self, p: f64) -> f64 {
        self.mean + self.sd * p
    }
}

/// Mean prediction over `n_clips` independently sampled clips
/// (augmentation off, eval mode). Classification heads yield the mean
/// probability.
pub fn multiclip_predict(
    model: &CoReEchoModel,
    video: &VideoRecord,
    sampler: &SamplerConfig,
    n_clips: usize,
    rng: &mut impl Rng,
    norm: Option<&LabelNorm>,
) -> Result<f64> {
    if n_clips == 0 {
        return Err(Error::Config("multiclip_predict needs n_clips >= 1".into()));
    }
    let mut rows = Vec::new();
    let mut shape = None;
    for _ in 0..n_clips {
        let clip = sample_clip(video, sampler, rng);
        shape.get_or_insert_with(|| clip.shape().to_vec());
        rows.extend_from_slice(clip.data());
    }
    let mut full_shape = vec![n_clips];
    full_shape.extend_from_slice(&shape.unwrap());
    let clips = Tensor::new(full_shape, rows)?;

    let tape = Tape::new();
    let mut bindings = Bindings::new();
    let x = tape.constant(clips);
    let e = model.encoder.forward_eval(&tape, &mut bindings, &x)?;
    let preds = model.head.forward_eval(&tape, &mut bindings, &e)?;
    let raw = preds.value();
    let mean = raw.data().iter().sum::<f64>() / n_clips as f64;
    Ok(match norm {
        Some(n) => n.denormalize(mean),
        None => mean,
    })
}

/// One deterministic prediction per record; each record's clip draws come
/// from a stream derived from (seed, record index).
pub fn predict_records(
    model: &CoReEchoModel,
    records: &[&VideoRecord],
    sampler: &SamplerConfig,
    n_clips: usize,
    seed: u64,
    norm: Option<&LabelNorm>,
) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[seed, EVAL_STREAM_TAG, i as u64]));
            multiclip_predict(model, v, sampler, n_clips, &mut rng, norm)
        })
        .collect()
}

/// Multi-clip averaged metrics over a record list, routed by the head task.
pub fn evaluate_split(
    model: &CoReEchoModel,
    records: &[&VideoRecord],
    sampler: &SamplerConfig,
    n_clips: usize,
    seed: u64,
    norm: Option<&LabelNorm>,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Data("evaluate_split on an empty record list".into()));
    }
    let labels: Vec<f64> = records.iter().map(|r| r.label).collect();
    match model.head.task {
        HeadTask::Regression => {
            let preds = predict_records(model, records, sampler, n_clips, seed, norm)?;
            regression_metrics(&preds, &labels)
        }
        HeadTask::Classification => {
            let preds = predict_records(model, records, sampler, n_clips, seed, None)?;
            classification_metrics(&preds, &labels, 0.5)
        }
    }
}

/// Deterministic single-clip embeddings for every record.
pub fn embed_records(
    model: &CoReEchoModel,
    records: &[&VideoRecord],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut ids = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut embeddings = Vec::with_capacity(records.len());
    let dim = model.encoder.embed_dim();
    // Chunk the encodes so tape overhead amortizes without holding every
    // activation at once.
    for (chunk_start, chunk) in records.chunks(32).enumerate().map(|(ci, c)| (ci * 32, c)) {
        let mut rows = Vec::new();
        let mut clip_shape = None;
        for (off, v) in chunk.iter().enumerate() {
            let i = chunk_start + off;
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[seed, EMBED_STREAM_TAG, i as u64]));
            let clip = sample_clip(v, sampler, &mut rng);
            clip_shape.get_or_insert_with(|| clip.shape().to_vec());
            rows.extend_from_slice(clip.data());
            ids.push(v.id.clone());
            labels.push(v.label);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&clip_shape.unwrap());
        let clips = Tensor::new(shape, rows)?;
        let e = model.encoder.encode_eval(&clips)?;
        for r in 0..chunk.len() {
            embeddings.push(e.data()[r * dim..(r + 1) * dim].to_vec());
        }
    }
    Ok((ids, labels, embeddings))
}

/// Write `id,label,e_0..e_{C-1}` rows; returns the row count.
pub fn export_embeddings(
    model: &CoReEchoModel,
    records: &[&VideoRecord],
    sampler: &SamplerConfig,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let (ids, labels, embeddings) = embed_records(model, records, sampler, seed)?;
    let dim = model.encoder.embed_dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "id,label")?;
    for c in 0..dim {
        write!(f, ",e_{c}")?;
    }
    writeln!(f)?;
    for ((id, label), row) in ids.iter().zip(labels.iter()).zip(embeddings.iter()) {
        write!(f, "{id},{label}")?;
        for v in row {
            write!(f, ",{v:.9}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(ids.len())
}
