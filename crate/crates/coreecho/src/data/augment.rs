//! Clip augmentation. One spatial transform is drawn per clip and applied to
//! every frame, preserving temporal coherence and the clip's shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugmentPolicy {
    /// Identity.
    None,
    /// Zero-pad by `pad` on every side, then random-crop back to the
    /// original size (pad 6 turns 112x112 into 124x124 before the crop).
    PadCrop { pad: usize },
    /// Random rotation/scale/translation with bilinear resampling and zero
    /// fill outside the source.
    Affine {
        max_rotate_deg: f64,
        scale_min: f64,
        scale_max: f64,
        max_translate: f64,
    },
}

impl AugmentPolicy {
    /// Paper-style pad-and-crop defaults.
    pub fn pad_crop_default() -> Self {
        AugmentPolicy::PadCrop { pad: 6 }
    }

    /// Paper-style affine defaults: +/-20 degrees, scale 0.8-1.1,
    /// translation up to 10% of the frame.
    pub fn affine_default() -> Self {
        AugmentPolicy::Affine {
            max_rotate_deg: 20.0,
            scale_min: 0.8,
            scale_max: 1.1,
            max_translate: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AugmentPolicy::Affine {
            scale_min,
            scale_max,
            ..
        } = self
        {
            if !(*scale_min > 0.0 && scale_max >= scale_min) {
                return Err(Error::Config(format!(
                    "bad affine scale range [{scale_min}, {scale_max}]"
                )));
            }
        }
        Ok(())
    }
}

fn bilinear_zero_fill(
    frame: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    fy: f64,
    fx: f64,
    c: usize,
) -> f64 {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let wy = fy - y0;
    let wx = fx - x0;
    let mut acc = 0.0;
    for (dy, wyv) in [(0isize, 1.0 - wy), (1, wy)] {
        let y = y0 as isize + dy;
        if y < 0 || y >= height as isize || wyv == 0.0 {
            continue;
        }
        for (dx, wxv) in [(0isize, 1.0 - wx), (1, wx)] {
            let x = x0 as isize + dx;
            if x < 0 || x >= width as isize || wxv == 0.0 {
                continue;
            }
            acc += wyv * wxv * frame[(y as usize * width + x as usize) * channels + c];
        }
    }
    acc
}

/// Apply one randomly drawn instance of the policy to a (F, H, W, C) clip.
pub fn augment(clip: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    policy.validate()?;
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "augment",
            detail: format!("clip must be (f, h, w, c), got {shape:?}"),
        });
    }
    let (frames, height, width, channels) = (shape[0], shape[1], shape[2], shape[3]);
    match policy {
        AugmentPolicy::None => Ok(clip.clone()),
        AugmentPolicy::PadCrop { pad } => {
            let oy = rng.gen_range(0..=2 * pad) as isize - *pad as isize;
            let ox = rng.gen_range(0..=2 * pad) as isize - *pad as isize;
            let mut out = Tensor::zeros(shape);
            let fl = height * width * channels;
            for t in 0..frames {
                let src = &clip.data()[t * fl..(t + 1) * fl];
                let dst = &mut out.data_mut()[t * fl..(t + 1) * fl];
                for y in 0..height as isize {
                    let sy = y + oy;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for x in 0..width as isize {
                        let sx = x + ox;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let d = (y as usize * width + x as usize) * channels;
                        let s = (sy as usize * width + sx as usize) * channels;
                        dst[d..d + channels].copy_from_slice(&src[s..s + channels]);
                    }
                }
            }
            Ok(out)
        }
        AugmentPolicy::Affine {
            max_rotate_deg,
            scale_min,
            scale_max,
            max_translate,
        } => {
            let theta = rng.gen_range(-max_rotate_deg..=*max_rotate_deg).to_radians();
            let s = rng.gen_range(*scale_min..=*scale_max);
            let ty = rng.gen_range(-max_translate..=*max_translate) * height as f64;
            let tx = rng.gen_range(-max_translate..=*max_translate) * width as f64;
            Ok(apply_affine(
                clip, frames, height, width, channels, theta, s, ty, tx,
            ))
        }
    }
}

/// Inverse-map every output pixel through the rigid transform and sample the
/// source bilinearly. Exposed for deterministic-parameter tests.
#[allow(clippy::too_many_arguments)]
pub fn apply_affine(
    clip: &Tensor,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    theta: f64,
    scale: f64,
    ty: f64,
    tx: f64,
) -> Tensor {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let (sin_t, cos_t) = (-theta).sin_cos();
    let mut out = Tensor::zeros(clip.shape());
    let fl = height * width * channels;
    for t in 0..frames {
        let src = &clip.data()[t * fl..(t + 1) * fl];
        let dst = &mut out.data_mut()[t * fl..(t + 1) * fl];
        for y in 0..height {
            for x in 0..width {
                // Undo translation, center, unscale, unrotate.
                let py = (y as f64 - ty - cy) / scale;
                let px = (x as f64 - tx - cx) / scale;
                let sy = cos_t * py - sin_t * px + cy;
                let sx = sin_t * py + cos_t * px + cx;
                for c in 0..channels {
                    dst[(y * width + x) * channels + c] =
                        bilinear_zero_fill(src, height, width, channels, sy, sx, c);
                }
            }
        }
    }
    out
}
