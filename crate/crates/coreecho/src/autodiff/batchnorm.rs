//! Batch normalization over the trailing (channel) axis.
//!
//! Train mode normalizes with the batch mean and population variance; the
//! unbiased variance is handed back separately for running-stat updates.

use super::tape::{Node, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Saved context for the backward pass.
pub(crate) struct BnRecord {
    pub x: usize,
    pub scale: usize,
    pub shift: usize,
    /// Normalized input x-hat, same layout as x.
    pub normalized: Vec<f64>,
    /// Per-channel 1/sqrt(var + eps) actually used in the forward.
    pub inv_std: Vec<f64>,
    pub channels: usize,
    pub train: bool,
}

/// Per-channel batch statistics from one train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance used for normalization.
    pub var_population: Vec<f64>,
    /// Unbiased variance, the conventional running-stat update target.
    pub var_unbiased: Vec<f64>,
}

fn check_shapes(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<usize> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            detail: format!("input must have a batch and channel axis, got {shape:?}"),
        });
    }
    let channels = *shape.last().unwrap();
    if scale.shape() != [channels] || shift.shape() != [channels] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            detail: format!(
                "scale {:?} / shift {:?} must both be [{channels}]",
                scale.shape(),
                shift.shape()
            ),
        });
    }
    Ok(channels)
}

pub(crate) fn forward_train(
    x: &Var,
    scale: &Var,
    shift: &Var,
    eps: f64,
) -> Result<(Var, BatchStats)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("batch norm eps {eps} must be > 0")));
    }
    let xv = x.value();
    let sv = scale.value();
    let bv = shift.value();
    let channels = check_shapes(&xv, &sv, &bv)?;
    if xv.shape()[0] < 2 {
        return Err(Error::Domain {
            op: "batch_norm",
            detail: "train mode requires batch >= 2 (variance undefined)".into(),
        });
    }
    let count = xv.len() / channels;
    let mut mean = vec![0.0; channels];
    for (i, v) in xv.data().iter().enumerate() {
        mean[i % channels] += v;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; channels];
    for (i, v) in xv.data().iter().enumerate() {
        let d = v - mean[i % channels];
        var[i % channels] += d * d;
    }
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for (i, v) in xv.data().iter().enumerate() {
        let c = i % channels;
        let nh = (v - mean[c]) * inv_std[c];
        normalized[i] = nh;
        out[i] = sv.data()[c] * nh + bv.data()[c];
    }
    let var_unbiased: Vec<f64> = var
        .iter()
        .map(|v| v * count as f64 / (count as f64 - 1.0))
        .collect();
    let stats = BatchStats {
        mean,
        var_population: var,
        var_unbiased,
    };
    let requires_grad = x.requires_grad() || scale.requires_grad() || shift.requires_grad();
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    if !value.all_finite() {
        return Err(Error::NonFinite { op: "batch_norm" });
    }
    let out = x.tape().push(Node {
        op: Op::BatchNorm(Box::new(BnRecord {
            x: x.id,
            scale: scale.id,
            shift: shift.id,
            normalized,
            inv_std,
            channels,
            train: true,
        })),
        value,
        grad: None,
        requires_grad,
    });
    Ok((out, stats))
}

pub(crate) fn forward_eval(
    x: &Var,
    scale: &Var,
    shift: &Var,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("batch norm eps {eps} must be > 0")));
    }
    let xv = x.value();
    let sv = scale.value();
    let bv = shift.value();
    let channels = check_shapes(&xv, &sv, &bv)?;
    if running_mean.len() != channels || running_var.len() != channels {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            detail: format!(
                "running stats of length {}/{} for {channels} channels",
                running_mean.len(),
                running_var.len()
            ),
        });
    }
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for (i, v) in xv.data().iter().enumerate() {
        let c = i % channels;
        let nh = (v - running_mean[c]) * inv_std[c];
        normalized[i] = nh;
        out[i] = sv.data()[c] * nh + bv.data()[c];
    }
    let requires_grad = x.requires_grad() || scale.requires_grad() || shift.requires_grad();
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    if !value.all_finite() {
        return Err(Error::NonFinite { op: "batch_norm" });
    }
    Ok(x.tape().push(Node {
        op: Op::BatchNorm(Box::new(BnRecord {
            x: x.id,
            scale: scale.id,
            shift: shift.id,
            normalized,
            inv_std,
            channels,
            train: false,
        })),
        value,
        grad: None,
        requires_grad,
    }))
}

pub(crate) fn backward(
    rec: &BnRecord,
    g: &Tensor,
    parents: &[Node],
) -> Result<(Tensor, Tensor, Tensor)> {
    let channels = rec.channels;
    let total = g.len();
    let count = total / channels;
    let gamma = parents[rec.scale].value.data();
    let x_shape = parents[rec.x].value.shape().to_vec();

    let mut sum_g = vec![0.0; channels];
    let mut sum_g_nh = vec![0.0; channels];
    for (i, gv) in g.data().iter().enumerate() {
        let c = i % channels;
        sum_g[c] += gv;
        sum_g_nh[c] += gv * rec.normalized[i];
    }

    let mut gx = vec![0.0; total];
    if rec.train {
        let inv_count = 1.0 / count as f64;
        for (i, gv) in g.data().iter().enumerate() {
            let c = i % channels;
            gx[i] = gamma[c]
                * rec.inv_std[c]
                * (gv - sum_g[c] * inv_count - rec.normalized[i] * sum_g_nh[c] * inv_count);
        }
    } else {
        for (i, gv) in g.data().iter().enumerate() {
            let c = i % channels;
            gx[i] = gamma[c] * rec.inv_std[c] * gv;
        }
    }

    Ok((
        Tensor::new(x_shape, gx)?,
        Tensor::new(vec![channels], sum_g_nh)?,
        Tensor::new(vec![channels], sum_g)?,
    ))
}
