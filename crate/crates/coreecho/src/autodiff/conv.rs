//! Small 3x3x3 3-D convolution (zero padding 1) and global average pooling.
//!
//! Inputs are channels-last: (batch, frames, height, width, channels).
//! Weights are (out_channels, 3, 3, 3, in_channels). The forward runs as
//! im2col + gemm per batch item; backward recomputes the patch matrix rather
//! than storing it.

use super::tape::{Node, Op, Var};
use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

const K: usize = 3;
const PAD: isize = 1;

pub(crate) struct ConvRecord {
    pub x: usize,
    pub w: usize,
    pub stride: [usize; 3],
}

fn out_extent(n: usize, stride: usize) -> usize {
    // (n + 2*pad - k) / stride + 1 with k = 3, pad = 1
    (n - 1) / stride + 1
}

struct Dims {
    batch: usize,
    f: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    of: usize,
    oh: usize,
    ow: usize,
    patch: usize,
}

fn dims(x: &Tensor, w: &Tensor, stride: [usize; 3]) -> Result<Dims> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("input must be (b, f, h, w, c), got {xs:?}"),
        });
    }
    if ws.len() != 5 || ws[1] != K || ws[2] != K || ws[3] != K || ws[4] != xs[4] {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("weight {ws:?} does not match (cout, 3, 3, 3, {})", xs[4]),
        });
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::Config("conv3d stride must be positive".into()));
    }
    Ok(Dims {
        batch: xs[0],
        f: xs[1],
        h: xs[2],
        w: xs[3],
        cin: xs[4],
        cout: ws[0],
        of: out_extent(xs[1], stride[0]),
        oh: out_extent(xs[2], stride[1]),
        ow: out_extent(xs[3], stride[2]),
        patch: K * K * K * xs[4],
    })
}

/// Fill `col` (positions x patch) with patches of one batch item.
fn im2col(x: &[f64], d: &Dims, stride: [usize; 3], col: &mut [f64]) {
    col.fill(0.0);
    let (f, h, w, cin) = (d.f, d.h, d.w, d.cin);
    let mut row = 0usize;
    for ot in 0..d.of {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let base = row * d.patch;
                for kt in 0..K {
                    let t = (ot * stride[0] + kt) as isize - PAD;
                    if t < 0 || t >= f as isize {
                        continue;
                    }
                    for ky in 0..K {
                        let y = (oy * stride[1] + ky) as isize - PAD;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..K {
                            let xco = (ox * stride[2] + kx) as isize - PAD;
                            if xco < 0 || xco >= w as isize {
                                continue;
                            }
                            let src = (((t as usize * h) + y as usize) * w + xco as usize) * cin;
                            let dst = base + (((kt * K) + ky) * K + kx) * cin;
                            col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add `col`-layout gradients back into one batch item.
fn col2im_acc(col: &[f64], d: &Dims, stride: [usize; 3], gx: &mut [f64]) {
    let (f, h, w, cin) = (d.f, d.h, d.w, d.cin);
    let mut row = 0usize;
    for ot in 0..d.of {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let base = row * d.patch;
                for kt in 0..K {
                    let t = (ot * stride[0] + kt) as isize - PAD;
                    if t < 0 || t >= f as isize {
                        continue;
                    }
                    for ky in 0..K {
                        let y = (oy * stride[1] + ky) as isize - PAD;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..K {
                            let xco = (ox * stride[2] + kx) as isize - PAD;
                            if xco < 0 || xco >= w as isize {
                                continue;
                            }
                            let dst = (((t as usize * h) + y as usize) * w + xco as usize) * cin;
                            let src = base + (((kt * K) + ky) * K + kx) * cin;
                            for c in 0..cin {
                                gx[dst + c] += col[src + c];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward(x: &Var, weight: &Var, stride: [usize; 3]) -> Result<Var> {
    let xv = x.value_ref();
    let wv = weight.value();
    let d = dims(&xv, &wv, stride)?;
    let positions = d.of * d.oh * d.ow;

    // Transposed weights (patch x cout) so the gemm output is channels-last.
    let mut w_t = vec![0.0; d.patch * d.cout];
    for o in 0..d.cout {
        for p in 0..d.patch {
            w_t[p * d.cout + o] = wv.data()[o * d.patch + p];
        }
    }

    let item_in = d.f * d.h * d.w * d.cin;
    let item_out = positions * d.cout;
    let mut out = vec![0.0; d.batch * item_out];
    let mut col = vec![0.0; positions * d.patch];
    for b in 0..d.batch {
        im2col(&xv.data()[b * item_in..(b + 1) * item_in], &d, stride, &mut col);
        gemm_acc(
            positions,
            d.patch,
            d.cout,
            &col,
            &w_t,
            &mut out[b * item_out..(b + 1) * item_out],
        );
    }
    let requires_grad = x.requires_grad() || weight.requires_grad();
    drop(xv);
    let value = Tensor::new(vec![d.batch, d.of, d.oh, d.ow, d.cout], out)?;
    if !value.all_finite() {
        return Err(Error::NonFinite { op: "conv3d" });
    }
    Ok(x.tape().push(Node {
        op: Op::Conv3d(Box::new(ConvRecord {
            x: x.id,
            w: weight.id,
            stride,
        })),
        value,
        grad: None,
        requires_grad,
    }))
}

pub(crate) fn backward(
    rec: &ConvRecord,
    g: &Tensor,
    parents: &[Node],
) -> Result<(Tensor, Tensor)> {
    let xv = &parents[rec.x].value;
    let wv = &parents[rec.w].value;
    let d = dims(xv, wv, rec.stride)?;
    let positions = d.of * d.oh * d.ow;
    let item_in = d.f * d.h * d.w * d.cin;
    let item_out = positions * d.cout;

    let mut gx = vec![0.0; xv.len()];
    let mut gw = vec![0.0; wv.len()];
    let mut col = vec![0.0; positions * d.patch];
    let mut gcol = vec![0.0; positions * d.patch];
    for b in 0..d.batch {
        let g_mat = &g.data()[b * item_out..(b + 1) * item_out];
        im2col(&xv.data()[b * item_in..(b + 1) * item_in], &d, rec.stride, &mut col);
        // gw[o][k] += sum_p g[p][o] * col[p][k]
        for p in 0..positions {
            let grow = &g_mat[p * d.cout..(p + 1) * d.cout];
            let crow = &col[p * d.patch..(p + 1) * d.patch];
            for (o, &go) in grow.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let gwrow = &mut gw[o * d.patch..(o + 1) * d.patch];
                for (gwv, cv) in gwrow.iter_mut().zip(crow.iter()) {
                    *gwv += go * cv;
                }
            }
        }
        // gcol = g_mat (positions x cout) . w (cout x patch)
        gcol.fill(0.0);
        gemm_acc(positions, d.cout, d.patch, g_mat, wv.data(), &mut gcol);
        col2im_acc(&gcol, &d, rec.stride, &mut gx[b * item_in..(b + 1) * item_in]);
    }
    Ok((
        Tensor::new(xv.shape().to_vec(), gx)?,
        Tensor::new(wv.shape().to_vec(), gw)?,
    ))
}

pub(crate) fn global_avg_pool(x: &Var) -> Result<Var> {
    let xv = x.value_ref();
    let shape = xv.shape();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool",
            detail: format!("input must be (b, f, h, w, c), got {shape:?}"),
        });
    }
    let (b, c) = (shape[0], shape[4]);
    let positions = shape[1] * shape[2] * shape[3];
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        let orow = &mut out[bi * c..(bi + 1) * c];
        for p in 0..positions {
            let base = (bi * positions + p) * c;
            for (ci, ov) in orow.iter_mut().enumerate() {
                *ov += xv.data()[base + ci];
            }
        }
        for ov in orow.iter_mut() {
            *ov /= positions as f64;
        }
    }
    let requires_grad = x.requires_grad();
    drop(xv);
    let value = Tensor::new(vec![b, c], out)?;
    if !value.all_finite() {
        return Err(Error::NonFinite {
            op: "global_avg_pool",
        });
    }
    Ok(x.tape().push(Node {
        op: Op::GlobalAvgPool { x: x.id },
        value,
        grad: None,
        requires_grad,
    }))
}
