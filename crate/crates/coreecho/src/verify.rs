//! Finite-difference verification battery covering every differentiation
//! primitive, the regression head, the encoder, and the full stage-1
//! objective. Shared by the `gradcheck` CLI command and the acceptance
//! suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Mode, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::stage1_loss;
use crate::model::{Bindings, ClipShape, CoReEchoModel, EncoderConfig, HeadTask};
use crate::Error;

pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("consistent shape")
}

fn check<F>(
    entries: &mut Vec<SuiteEntry>,
    name: &str,
    params: Vec<(String, Tensor)>,
    h: f64,
    tol: f64,
    builder: F,
) -> Result<()>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check(builder, &params, h, tol)?;
    entries.push(SuiteEntry {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Every primitive the engine exposes, finite-difference checked through a
/// scalar reduction.
pub fn primitive_gradient_suite(h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut entries = Vec::new();

    let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let pair = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];

    check(&mut entries, "add", pair.clone(), h, tol, |_, v| {
        v[0].add(&v[1])?.sum()
    })?;
    check(&mut entries, "sub", pair.clone(), h, tol, |_, v| {
        v[0].sub(&v[1])?.mean()
    })?;
    check(&mut entries, "mul-elementwise", pair.clone(), h, tol, |_, v| {
        v[0].mul(&v[1])?.sum()
    })?;
    check(&mut entries, "scale", vec![pair[0].clone()], h, tol, |_, v| {
        v[0].scale(-1.7)?.sum()
    })?;

    let m1 = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
    let m2 = rand_tensor(&mut rng, &[4, 2], -1.5, 1.5);
    check(
        &mut entries,
        "matmul",
        vec![("m1".into(), m1), ("m2".into(), m2)],
        h,
        tol,
        |_, v| v[0].matmul(&v[1])?.gelu()?.sum(),
    )?;

    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    check(
        &mut entries,
        "affine",
        vec![("x".into(), x), ("w".into(), w)],
        h,
        tol,
        |_, v| v[0].affine(&v[1])?.sigmoid()?.sum(),
    )?;

    let pos = rand_tensor(&mut rng, &[6], 0.2, 3.0);
    check(&mut entries, "exp", vec![("x".into(), pos.clone())], h, tol, |_, v| {
        v[0].exp()?.mean()
    })?;
    check(&mut entries, "log", vec![("x".into(), pos.clone())], h, tol, |_, v| {
        v[0].log()?.sum()
    })?;
    // abs away from the kink.
    let signed = Tensor::from_vec(vec![0.7, -1.3, 2.4, -0.5]);
    check(&mut entries, "abs", vec![("x".into(), signed)], h, tol, |_, v| {
        v[0].abs()?.mean()
    })?;
    let wide = rand_tensor(&mut rng, &[5], -3.0, 3.0);
    check(
        &mut entries,
        "sigmoid",
        vec![("x".into(), wide.clone())],
        h,
        tol,
        |_, v| v[0].sigmoid()?.sum(),
    )?;
    check(&mut entries, "gelu", vec![("x".into(), wide.clone())], h, tol, |_, v| {
        v[0].gelu()?.sum()
    })?;
    check(&mut entries, "sum", vec![("x".into(), wide.clone())], h, tol, |_, v| {
        v[0].sum()
    })?;
    check(&mut entries, "mean", vec![("x".into(), wide.clone())], h, tol, |_, v| {
        v[0].mean()
    })?;

    let lse_in = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    check(
        &mut entries,
        "logsumexp-over-axis",
        vec![("x".into(), lse_in)],
        h,
        tol,
        |_, v| v[0].logsumexp(1)?.sum(),
    )?;

    let gather_in = rand_tensor(&mut rng, &[8], -2.0, 2.0);
    check(
        &mut entries,
        "gather",
        vec![("x".into(), gather_in)],
        h,
        tol,
        |_, v| v[0].gather(&[0, 3, 3, 7])?.sum(),
    )?;

    let stack_in = rand_tensor(&mut rng, &[4], -2.0, 2.0);
    check(
        &mut entries,
        "stack-scalars",
        vec![("x".into(), stack_in)],
        h,
        tol,
        |tape, v| {
            let s0 = v[0].gather(&[0])?.reshape(vec![])?;
            let s1 = v[0].gather(&[2])?.reshape(vec![])?.scale(2.0)?;
            tape.stack_scalars(&[s0, s1])?.mean()
        },
    )?;

    let reshape_in = rand_tensor(&mut rng, &[6], -2.0, 2.0);
    check(
        &mut entries,
        "reshape",
        vec![("x".into(), reshape_in)],
        h,
        tol,
        |_, v| v[0].reshape(vec![2, 3])?.gelu()?.sum(),
    )?;

    // clamp strictly inside the interval so FD stays smooth.
    let clamp_in = Tensor::from_vec(vec![0.2, 0.5, 0.8]);
    check(
        &mut entries,
        "clamp",
        vec![("x".into(), clamp_in)],
        h,
        tol,
        |_, v| v[0].clamp(0.0, 1.0)?.log()?.sum(),
    )?;

    let emb = rand_tensor(&mut rng, &[5, 3], -1.5, 1.5);
    check(
        &mut entries,
        "pairwise_l2",
        vec![("e".into(), emb)],
        h,
        tol,
        |_, v| v[0].pairwise_l2()?.sum(),
    )?;

    let drop_in = rand_tensor(&mut rng, &[12], -1.0, 1.0);
    check(
        &mut entries,
        "dropout",
        vec![("x".into(), drop_in)],
        h,
        tol,
        |_, v| {
            // Frozen mask: the rng is reseeded on every evaluation.
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            v[0].dropout(0.4, Mode::Train, &mut rng)?.sum()
        },
    )?;

    let bn_x = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let bn_scale = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let bn_shift = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    check(
        &mut entries,
        "batch_norm-train",
        vec![
            ("x".into(), bn_x.clone()),
            ("scale".into(), bn_scale.clone()),
            ("shift".into(), bn_shift.clone()),
        ],
        h,
        tol,
        |_, v| {
            let (out, _) = v[0].batch_norm_train(&v[1], &v[2], 1e-5)?;
            out.gelu()?.sum()
        },
    )?;
    check(
        &mut entries,
        "batch_norm-eval",
        vec![
            ("x".into(), bn_x),
            ("scale".into(), bn_scale),
            ("shift".into(), bn_shift),
        ],
        h,
        tol,
        |_, v| {
            v[0].batch_norm_eval(&v[1], &v[2], &[0.1, -0.2, 0.3], &[1.1, 0.9, 1.3], 1e-5)?
                .sum()
        },
    )?;

    let conv_x = rand_tensor(&mut rng, &[2, 3, 5, 5, 2], 0.0, 1.0);
    let conv_w = rand_tensor(&mut rng, &[2, 3, 3, 3, 2], -0.3, 0.3);
    check(
        &mut entries,
        "conv3d",
        vec![("x".into(), conv_x.clone()), ("w".into(), conv_w)],
        h,
        tol,
        |_, v| v[0].conv3d(&v[1], [2, 2, 2])?.gelu()?.sum(),
    )?;
    check(
        &mut entries,
        "global_avg_pool",
        vec![("x".into(), conv_x)],
        h,
        tol,
        |_, v| v[0].global_avg_pool()?.gelu()?.sum(),
    )?;

    Ok(entries)
}

fn micro_model(embed_dim: usize, seed: u64) -> Result<CoReEchoModel> {
    CoReEchoModel::init(
        EncoderConfig {
            clip: ClipShape {
                frames: 4,
                height: 6,
                width: 6,
                channels: 1,
            },
            widths: vec![2, 3],
            embed_dim,
            temporal_stride: 2,
        },
        0.4,
        HeadTask::Regression,
        seed,
    )
}

/// Head formula, encoder, and full stage-1 loss finite-difference checks on
/// a micro model.
pub fn model_gradient_suite(h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let mut entries = Vec::new();
    let model = micro_model(5, 17)?;
    let clips = rand_tensor(&mut rng, &[4, 4, 6, 6, 1], 0.0, 1.0);
    let labels = vec![12.0, 12.0, 64.0, 64.0];
    let embeddings = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);

    // Head formula through train-mode batch norm and frozen dropout masks.
    {
        let head_params: Vec<(String, Tensor)> = model
            .head
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let base = model.clone();
        let emb = embeddings.clone();
        let labels = labels.clone();
        check(
            &mut entries,
            "head-forward",
            head_params,
            h,
            tol,
            move |tape, vars| {
                let mut m = base.clone();
                let mut bindings = Bindings::new();
                for (p, v) in m.head.params().iter().zip(vars) {
                    bindings.preset(p.name.clone(), v.clone());
                }
                let e = tape.constant(emb.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let preds = m.head.forward_train(tape, &mut bindings, &e, &mut rng)?;
                let target = tape.constant(Tensor::from_vec(labels.clone()));
                preds.sub(&target)?.abs()?.mean()
            },
        )?;
    }

    // Encoder on a 2-sample micro-batch.
    {
        let enc_params: Vec<(String, Tensor)> = model
            .encoder
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let base = model.clone();
        let two_clips = rand_tensor(&mut rng, &[2, 4, 6, 6, 1], 0.0, 1.0);
        check(
            &mut entries,
            "encoder-forward",
            enc_params,
            h,
            tol,
            move |tape, vars| {
                let mut m = base.clone();
                let mut bindings = Bindings::new();
                for (p, v) in m.encoder.params().iter().zip(vars) {
                    bindings.preset(p.name.clone(), v.clone());
                }
                let x = tape.constant(two_clips.clone());
                let e = m.encoder.forward_train(tape, &mut bindings, &x)?;
                e.gelu()?.sum()
            },
        )?;
    }

    // Full stage-1 objective. The stop-gradient means the optimizer's
    // encoder gradient is d(RnC)/d(theta) while the total loss value still
    // varies with the encoder through the L1 branch, so the finite
    // differences are taken against the branch each parameter group actually
    // trains on: the total loss for head parameters, the contrastive
    // component for encoder parameters. (That those equal the full-graph
    // gradients bitwise is the gradient-partition property, tested in the
    // loss module.)
    {
        let head_params: Vec<(String, Tensor)> = model
            .head
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let base = model.clone();
        let clips_c = clips.clone();
        let labels_c = labels.clone();
        check(
            &mut entries,
            "stage1-loss-head-params",
            head_params,
            h,
            tol,
            move |tape, vars| {
                let mut m = base.clone();
                let mut bindings = Bindings::new();
                for (p, v) in m.head.params().iter().zip(vars) {
                    bindings.preset(p.name.clone(), v.clone());
                }
                let x = tape.constant(clips_c.clone());
                let e = m.encoder.forward_train(tape, &mut bindings, &x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(555);
                let parts =
                    stage1_loss(&e, &labels_c, 1.0, &mut m.head, &mut bindings, &mut rng)?;
                Ok(parts.total)
            },
        )?;

        let enc_params: Vec<(String, Tensor)> = model
            .encoder
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let base = model.clone();
        check(
            &mut entries,
            "stage1-loss-encoder-params",
            enc_params,
            h,
            tol,
            move |tape, vars| {
                let mut m = base.clone();
                let mut bindings = Bindings::new();
                for (p, v) in m.encoder.params().iter().zip(vars) {
                    bindings.preset(p.name.clone(), v.clone());
                }
                let x = tape.constant(clips.clone());
                let e = m.encoder.forward_train(tape, &mut bindings, &x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(555);
                let parts =
                    stage1_loss(&e, &labels, 1.0, &mut m.head, &mut bindings, &mut rng)?;
                Ok(parts.rnc)
            },
        )?;
    }

    Ok(entries)
}

/// Run both suites; error text lists every breach.
pub fn full_gradient_suite(h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries = primitive_gradient_suite(h, tol)?;
    entries.extend(model_gradient_suite(h, tol)?);
    Ok(entries)
}

/// Convenience wrapper that fails with a summary if any entry breaches.
pub fn assert_gradient_suite(h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let entries = full_gradient_suite(h, tol)?;
    let failures: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{}: max rel err {:.3e}", e.name, e.report.max_rel_err()))
        .collect();
    if failures.is_empty() {
        Ok(entries)
    } else {
        Err(Error::GradCheck(failures.join("; ")))
    }
}
