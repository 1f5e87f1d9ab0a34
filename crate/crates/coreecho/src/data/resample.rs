//! Temporal and spatial resampling for transfer-dataset ingestion.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-pixel linear interpolation along time at `f_target` uniformly spaced
/// points including both endpoints.
pub fn temporal_resample(video: &Tensor, f_target: usize) -> Result<Tensor> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "temporal_resample",
            detail: format!("video must be (f, h, w, c), got {shape:?}"),
        });
    }
    if f_target < 2 {
        return Err(Error::Config(format!(
            "temporal resample target {f_target} must be >= 2"
        )));
    }
    let frames = shape[0];
    let fl: usize = shape[1] * shape[2] * shape[3];
    if frames == 1 {
        // Degenerate single-frame video: every target frame is a copy.
        let mut data = Vec::with_capacity(f_target * fl);
        for _ in 0..f_target {
            data.extend_from_slice(video.data());
        }
        return Tensor::new(vec![f_target, shape[1], shape[2], shape[3]], data);
    }
    let mut out = Vec::with_capacity(f_target * fl);
    let step = (frames - 1) as f64 / (f_target - 1) as f64;
    for i in 0..f_target {
        let pos = i as f64 * step;
        let t0 = pos.floor() as usize;
        let t1 = (t0 + 1).min(frames - 1);
        let frac = pos - t0 as f64;
        let a = &video.data()[t0 * fl..(t0 + 1) * fl];
        let b = &video.data()[t1 * fl..(t1 + 1) * fl];
        out.extend(
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| x + (y - x) * frac),
        );
    }
    Tensor::new(vec![f_target, shape[1], shape[2], shape[3]], out)
}

/// Bilinear spatial resize per frame, align-corners-false convention
/// (source coordinate = (dst + 0.5) * in/out - 0.5, edges clamped).
pub fn spatial_resize(video: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "spatial_resize",
            detail: format!("video must be (f, h, w, c), got {shape:?}"),
        });
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::Config("resize targets must be >= 1".into()));
    }
    let (frames, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if (h, w) == (new_h, new_w) {
        return Ok(video.clone());
    }
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let fl = h * w * c;
    let mut out = Vec::with_capacity(frames * new_h * new_w * c);
    for t in 0..frames {
        let frame = &video.data()[t * fl..(t + 1) * fl];
        for y in 0..new_h {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let y0f = src_y.floor();
            let wy = src_y - y0f;
            let y0 = (y0f.max(0.0) as usize).min(h - 1);
            let y1 = ((y0f + 1.0).max(0.0) as usize).min(h - 1);
            for x in 0..new_w {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let x0f = src_x.floor();
                let wx = src_x - x0f;
                let x0 = (x0f.max(0.0) as usize).min(w - 1);
                let x1 = ((x0f + 1.0).max(0.0) as usize).min(w - 1);
                for ci in 0..c {
                    let p00 = frame[(y0 * w + x0) * c + ci];
                    let p01 = frame[(y0 * w + x1) * c + ci];
                    let p10 = frame[(y1 * w + x0) * c + ci];
                    let p11 = frame[(y1 * w + x1) * c + ci];
                    let top = p00 + (p01 - p00) * wx;
                    let bottom = p10 + (p11 - p10) * wx;
                    out.push(top + (bottom - top) * wy);
                }
            }
        }
    }
    Tensor::new(vec![frames, new_h, new_w, c], out)
}
