//! Dataset ingestion, clip sampling, augmentation, resampling, batch
//! construction, and the synthetic video generator.

mod augment;
mod batch;
mod manifest;
mod resample;
mod sampler;
mod synth;
mod video;

pub use augment::{apply_affine, augment, AugmentPolicy};
pub use batch::{build_clip_batch, build_stage1_batch, ClipBatch};
pub use manifest::{read_manifest, write_manifest, ManifestRow, Split};
pub use resample::{spatial_resize, temporal_resample};
pub use sampler::{clip_from_indices, sample_clip, sample_clip_indices, SamplerConfig};
pub use synth::{
    pixel_count_label_estimate, render_video, synth_generate, SynthSpec, SYNTH_BG,
    SYNTH_CHANNELS, SYNTH_FG, SYNTH_NOISE_SIGMA,
};
pub use video::{read_vten, write_vten, VideoRecord, VTEN_MAGIC, VTEN_VERSION};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A loaded dataset: every video held in memory as u8 plus its manifest row.
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.csv");
        if !manifest.exists() {
            return Err(Error::Data(format!(
                "no manifest.csv under {}",
                dir.display()
            )));
        }
        let rows = read_manifest(&manifest)?;
        let mut records = Vec::with_capacity(rows.len());
        for row in rows {
            let path = dir.join(&row.file_name);
            let (frames, height, width, channels, pixels) = read_vten(&path)?;
            if !row.label.is_finite() || !(0.0..100.0).contains(&row.label) {
                return Err(Error::Data(format!(
                    "{}: label {} outside [0, 100)",
                    row.file_name, row.label
                )));
            }
            let id = row
                .file_name
                .strip_suffix(".vten")
                .unwrap_or(&row.file_name)
                .to_string();
            records.push(VideoRecord {
                id,
                frames,
                height,
                width,
                channels,
                pixels,
                label: row.label,
                split: row.split,
            });
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: empty manifest", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean and population standard deviation of one split's labels; a
    /// degenerate split reports sigma 1 so normalization stays invertible.
    pub fn label_stats(&self, split: Split) -> (f64, f64) {
        let labels: Vec<f64> = self.split(split).iter().map(|r| r.label).collect();
        if labels.is_empty() {
            return (0.0, 1.0);
        }
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let var = labels.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / labels.len() as f64;
        let sd = var.sqrt();
        (mean, if sd > 0.0 { sd } else { 1.0 })
    }

    /// All labels are exactly 0/1, i.e. a classification manifest.
    pub fn is_binary(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.label == 0.0 || r.label == 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_round_trips_through_ingestion() {
        let spec = SynthSpec {
            count: 8,
            frames: (6, 10),
            size: 16,
            area_fraction: (0.10, 0.14),
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&spec, 3, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 8);
        let (n_train, n_val, n_test) = spec.split_counts();
        assert_eq!(ds.split(Split::Train).len(), n_train);
        assert_eq!(ds.split(Split::Val).len(), n_val);
        assert_eq!(ds.split(Split::Test).len(), n_test);
        let (mean, sd) = ds.label_stats(Split::Train);
        assert!(mean > 0.0 && sd > 0.0);
    }

    #[test]
    fn load_missing_manifest_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(Error::Data(_))
        ));
    }
}
