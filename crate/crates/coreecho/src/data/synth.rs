//! Procedural synthetic dataset: a pulsating filled ellipse on a noisy
//! background. The ellipse area oscillates sinusoidally over one cycle
//! between a diastolic area A_d and a systolic area A_s, and the label is
//! the area fraction 100 * (A_d - A_s) / A_d, so the regression target is
//! recoverable from the rendered frames by construction.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRow, Split};
use super::video::VideoRecord;
use crate::error::{Error, Result};
use crate::util::mix_seed;

pub const SYNTH_BG: f64 = 0.15;
pub const SYNTH_FG: f64 = 0.85;
pub const SYNTH_NOISE_SIGMA: f64 = 0.05;
pub const SYNTH_CHANNELS: usize = 3;

const VIDEO_STREAM_TAG: u64 = 0x51D0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    /// Inclusive frame-count range.
    pub frames: (usize, usize),
    /// Square frame side (H = W).
    pub size: usize,
    /// Inclusive label range, percent units inside (0, 100).
    pub label_range: (f64, f64),
    /// Inclusive ellipse axis-ratio range (rx/ry); area is preserved across
    /// eccentricities, so the label mapping is unchanged.
    pub eccentricity: (f64, f64),
    /// Inclusive diastolic-area range as a fraction of the frame area.
    pub area_fraction: (f64, f64),
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 64,
            frames: (40, 80),
            size: 32,
            label_range: (10.0, 80.0),
            eccentricity: (0.85, 1.15),
            area_fraction: (0.18, 0.26),
            val_fraction: 1.0 / 6.0,
            test_fraction: 1.0 / 6.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synth count must be positive".into()));
        }
        if self.frames.0 < 4 || self.frames.0 > self.frames.1 {
            return Err(Error::Config(format!(
                "bad frame range {:?} (need 4 <= lo <= hi)",
                self.frames
            )));
        }
        if self.size < 8 {
            return Err(Error::Config("synth frame size must be >= 8".into()));
        }
        let (ll, lh) = self.label_range;
        if !(0.0 <= ll && ll <= lh && lh < 100.0) {
            return Err(Error::Config(format!(
                "label range {:?} outside [0, 100)",
                self.label_range
            )));
        }
        let (el, eh) = self.eccentricity;
        if !(el > 0.0 && el <= eh) {
            return Err(Error::Config(format!(
                "bad eccentricity range {:?}",
                self.eccentricity
            )));
        }
        let (al, ah) = self.area_fraction;
        if !(al > 0.0 && al <= ah && ah < 0.5) {
            return Err(Error::Config(format!(
                "bad area fraction range {:?}",
                self.area_fraction
            )));
        }
        if !(0.0..0.5).contains(&self.val_fraction) || !(0.0..0.5).contains(&self.test_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 0.5)".into()));
        }
        // The most eccentric, largest ellipse plus center jitter must fit.
        let r_max = (ah * (self.size * self.size) as f64 / PI).sqrt();
        let stretch = eh.max(1.0 / el).sqrt();
        if r_max * stretch + 2.0 + 1.0 > self.size as f64 / 2.0 {
            return Err(Error::Config(
                "ellipse (area fraction x eccentricity) does not fit the frame".into(),
            ));
        }
        Ok(())
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n_val = (self.count as f64 * self.val_fraction).floor() as usize;
        let n_test = (self.count as f64 * self.test_fraction).floor() as usize;
        (self.count - n_val - n_test, n_val, n_test)
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Render one video deterministically from (seed, index).
pub fn render_video(
    spec: &SynthSpec,
    seed: u64,
    index: usize,
    id: String,
    split: Split,
) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, VIDEO_STREAM_TAG, index as u64]));
    let frames = rng.gen_range(spec.frames.0..=spec.frames.1);
    let label = rng.gen_range(spec.label_range.0..=spec.label_range.1);
    let ecc = rng.gen_range(spec.eccentricity.0..=spec.eccentricity.1);
    let area_frac = rng.gen_range(spec.area_fraction.0..=spec.area_fraction.1);
    let size = spec.size;
    let diastolic_area = area_frac * (size * size) as f64;
    let r = (diastolic_area / PI).sqrt();
    let rx_d = r * ecc.sqrt();
    let ry_d = r / ecc.sqrt();
    let cx = size as f64 / 2.0 + rng.gen_range(-2.0..=2.0);
    let cy = size as f64 / 2.0 + rng.gen_range(-2.0..=2.0);
    let phase = rng.gen_range(0.0..2.0 * PI);

    let mut pixels = Vec::with_capacity(frames * size * size * SYNTH_CHANNELS);
    for k in 0..frames {
        // One full cycle over the video; area shrinks by label percent at
        // systole.
        let m = (1.0 - (2.0 * PI * k as f64 / frames as f64 + phase).cos()) / 2.0;
        let shrink = (1.0 - label / 100.0 * m).sqrt();
        let rx = rx_d * shrink;
        let ry = ry_d * shrink;
        let soft = rx.min(ry);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let rho = (dx * dx + dy * dy).sqrt();
                // Approximate signed distance in pixels for a 1-px soft edge.
                let d = (rho - 1.0) * soft;
                let coverage = (0.5 - d).clamp(0.0, 1.0);
                let v = SYNTH_BG
                    + (SYNTH_FG - SYNTH_BG) * coverage
                    + SYNTH_NOISE_SIGMA * gaussian(&mut rng);
                let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                for _ in 0..SYNTH_CHANNELS {
                    pixels.push(byte);
                }
            }
        }
    }
    VideoRecord {
        id,
        frames,
        height: size,
        width: size,
        channels: SYNTH_CHANNELS,
        pixels,
        label,
        split,
    }
}

/// Generate the dataset directory: one `.vten` per video plus
/// `manifest.csv`. Fully reproducible per seed. Returns the manifest path.
pub fn synth_generate(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (n_train, n_val, _) = spec.split_counts();
    let mut rows = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let id = format!("synth_{i:05}");
        let video = render_video(spec, seed, i, id.clone(), split);
        let file_name = format!("{id}.vten");
        video.write_vten(&out_dir.join(&file_name))?;
        rows.push(ManifestRow {
            file_name,
            label: video.label,
            split,
        });
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Threshold pixel counting plus a one-cycle cosine fit of the per-frame
/// areas; recovers the label without any learned model. Serves as the
/// independent sanity bound for the end-to-end regression target.
pub fn pixel_count_label_estimate(video: &VideoRecord) -> f64 {
    let fl = video.frame_len();
    let threshold = ((SYNTH_BG + SYNTH_FG) / 2.0 * 255.0) as u8; // 127
    let areas: Vec<f64> = (0..video.frames)
        .map(|t| {
            video.pixels[t * fl..(t + 1) * fl]
                .iter()
                .step_by(video.channels)
                .filter(|&&b| b > threshold)
                .count() as f64
        })
        .collect();
    let n = areas.len() as f64;
    let mut c0 = 0.0;
    let mut c1 = 0.0;
    let mut s1 = 0.0;
    for (k, a) in areas.iter().enumerate() {
        let ang = 2.0 * PI * k as f64 / n;
        c0 += a;
        c1 += a * ang.cos();
        s1 += a * ang.sin();
    }
    c0 /= n;
    c1 = 2.0 * c1 / n;
    s1 = 2.0 * s1 / n;
    let amplitude = (c1 * c1 + s1 * s1).sqrt();
    let a_d = c0 + amplitude;
    let a_s = c0 - amplitude;
    if a_d <= 0.0 {
        return 0.0;
    }
    100.0 * (a_d - a_s) / a_d
}
