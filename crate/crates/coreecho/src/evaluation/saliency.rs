//! Input-gradient saliency: |d prediction / d pixel|, one backward pass to
//! the input, normalized to [0,1] by the map's max.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Bindings, CoReEchoModel};

/// Normalize |gradient| by its max; an all-zero map stays zero.
fn normalize_magnitude(grad: &Tensor) -> Tensor {
    let max = grad.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        Tensor::zeros(grad.shape())
    } else {
        grad.map(|v| v.abs() / max)
    }
}

/// Raw signed input gradient of a scalar prediction w.r.t. a leaf input.
pub(crate) fn graph_input_gradient(input: &Var, prediction: &Var) -> Result<Tensor> {
    prediction.backward()?;
    Ok(input.grad_or_zeros())
}

/// Signed gradient of the model output w.r.t. one clip's pixels.
pub(crate) fn raw_input_gradient(model: &CoReEchoModel, clip: &Tensor) -> Result<Tensor> {
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "input_saliency",
            detail: format!("clip must be (f, h, w, c), got {shape:?}"),
        });
    }
    let mut batched = vec![1];
    batched.extend_from_slice(shape);
    let tape = Tape::new();
    let mut bindings = Bindings::new();
    let x = tape.leaf(clip.reshaped(batched)?, true);
    let e = model.encoder.forward_eval(&tape, &mut bindings, &x)?;
    let pred = model.head.forward_eval(&tape, &mut bindings, &e)?;
    let grad = graph_input_gradient(&x, &pred)?;
    grad.reshaped(shape.to_vec())
}

/// Per-pixel saliency volume, same shape as the clip, in [0,1].
pub fn input_saliency(model: &CoReEchoModel, clip: &Tensor) -> Result<Tensor> {
    Ok(normalize_magnitude(&raw_input_gradient(model, clip)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_saliency_is_proportional_to_weights() {
        // y = sum w_i x_i: the input gradient is w itself.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, -0.7, 1.1]), true);
        let w = tape.constant(Tensor::from_vec(vec![2.0, -4.0, 1.0]));
        let pred = x.mul(&w).unwrap().sum().unwrap();
        let grad = graph_input_gradient(&x, &pred).unwrap();
        assert_eq!(grad.data(), &[2.0, -4.0, 1.0]);
        let map = normalize_magnitude(&grad);
        assert_eq!(map.data(), &[0.5, 1.0, 0.25]);
    }

    #[test]
    fn all_zero_gradient_stays_zero() {
        let zeros = Tensor::zeros(&[4]);
        let map = normalize_magnitude(&zeros);
        assert!(map.data().iter().all(|v| *v == 0.0));
    }
}
