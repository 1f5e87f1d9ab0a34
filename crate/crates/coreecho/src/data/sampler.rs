//! Clip sampling: fixed-length, strided, wrap-around for short videos.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::video::VideoRecord;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Frames per clip (F_c).
    pub clip_len: usize,
    /// Frame stride (T).
    pub stride: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            clip_len: 36,
            stride: 4,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.stride == 0 {
            return Err(Error::Config(
                "clip length and stride must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Frames a clip covers in the source: (F_c - 1) * T + 1.
    pub fn span(&self) -> usize {
        (self.clip_len - 1) * self.stride + 1
    }
}

/// Frame indices for one sampled clip. Long videos pick a uniform start and
/// step by the stride; short videos wrap indices modulo the frame count
/// (cyclic padding) from a uniform start.
pub fn sample_clip_indices(
    frames: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let span = cfg.span();
    if frames >= span {
        let start = rng.gen_range(0..=frames - span);
        (0..cfg.clip_len).map(|k| start + k * cfg.stride).collect()
    } else {
        let start = rng.gen_range(0..frames);
        (0..cfg.clip_len)
            .map(|k| (start + k * cfg.stride) % frames)
            .collect()
    }
}

/// Extract a (F_c, H, W, C) clip tensor in [0,1] at the given frame indices.
pub fn clip_from_indices(video: &VideoRecord, indices: &[usize]) -> Tensor {
    let fl = video.frame_len();
    let mut data = Vec::with_capacity(indices.len() * fl);
    for &t in indices {
        data.extend(
            video.pixels[t * fl..(t + 1) * fl]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    Tensor::new(
        vec![indices.len(), video.height, video.width, video.channels],
        data,
    )
    .expect("frame dims consistent")
}

/// Randomly sample one clip from a video.
pub fn sample_clip(video: &VideoRecord, cfg: &SamplerConfig, rng: &mut impl Rng) -> Tensor {
    let indices = sample_clip_indices(video.frames, cfg, rng);
    clip_from_indices(video, &indices)
}
