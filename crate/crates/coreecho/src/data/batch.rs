//! Dual-clip batch construction and deterministic worker parallelism.
//!
//! Every batch row owns an rng stream derived by the caller from
//! (global seed, epoch, row index), so the result is identical for any
//! worker count or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentPolicy};
use super::sampler::{sample_clip, SamplerConfig};
use super::video::VideoRecord;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Clips plus labels, one row per clip.
pub struct ClipBatch {
    /// (rows, F_c, H, W, C)
    pub clips: Tensor,
    pub labels: Vec<f64>,
}

fn build_rows(
    videos_per_row: &[&VideoRecord],
    sampler: &SamplerConfig,
    policy: &AugmentPolicy,
    row_seeds: &[u64],
    workers: usize,
) -> Result<Tensor> {
    sampler.validate()?;
    policy.validate()?;
    let rows = videos_per_row.len();
    if rows == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if row_seeds.len() != rows {
        return Err(Error::Config(format!(
            "{} row seeds for {rows} rows",
            row_seeds.len()
        )));
    }
    let (h, w, c) = (
        videos_per_row[0].height,
        videos_per_row[0].width,
        videos_per_row[0].channels,
    );
    if videos_per_row
        .iter()
        .any(|v| (v.height, v.width, v.channels) != (h, w, c))
    {
        return Err(Error::Data("mixed video geometries in one batch".into()));
    }
    let row_len = sampler.clip_len * h * w * c;

    let make_row = |row: usize| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(row_seeds[row]);
        let clip = sample_clip(videos_per_row[row], sampler, &mut rng);
        Ok(augment(&clip, policy, &mut rng)?.into_data())
    };

    let mut data = vec![0.0; rows * row_len];
    if workers <= 1 || rows == 1 {
        for row in 0..rows {
            data[row * row_len..(row + 1) * row_len].copy_from_slice(&make_row(row)?);
        }
    } else {
        let chunk = rows.div_ceil(workers.min(rows));
        let results: Vec<Result<Vec<(usize, Vec<f64>)>>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for start in (0..rows).step_by(chunk) {
                let end = (start + chunk).min(rows);
                let make_row = &make_row;
                handles.push(scope.spawn(move || {
                    (start..end)
                        .map(|row| Ok((row, make_row(row)?)))
                        .collect::<Result<Vec<_>>>()
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("batch worker panicked"))
                .collect()
        });
        for res in results {
            for (row, row_data) in res? {
                data[row * row_len..(row + 1) * row_len].copy_from_slice(&row_data);
            }
        }
    }
    Tensor::new(vec![rows, sampler.clip_len, h, w, c], data)
}

/// Two independently sampled, independently augmented clips per video;
/// rows (2n, 2n+1) share video n's label.
pub fn build_stage1_batch(
    videos: &[&VideoRecord],
    sampler: &SamplerConfig,
    policy: &AugmentPolicy,
    row_seeds: &[u64],
    workers: usize,
) -> Result<ClipBatch> {
    let mut per_row = Vec::with_capacity(videos.len() * 2);
    let mut labels = Vec::with_capacity(videos.len() * 2);
    for v in videos {
        per_row.push(*v);
        per_row.push(*v);
        labels.push(v.label);
        labels.push(v.label);
    }
    let clips = build_rows(&per_row, sampler, policy, row_seeds, workers)?;
    Ok(ClipBatch { clips, labels })
}

/// One clip per video.
pub fn build_clip_batch(
    videos: &[&VideoRecord],
    sampler: &SamplerConfig,
    policy: &AugmentPolicy,
    row_seeds: &[u64],
    workers: usize,
) -> Result<ClipBatch> {
    let labels = videos.iter().map(|v| v.label).collect();
    let clips = build_rows(videos, sampler, policy, row_seeds, workers)?;
    Ok(ClipBatch { clips, labels })
}
