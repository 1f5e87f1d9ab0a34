//! Negative-set construction, the ranking contrastive loss over embeddings,
//! and the composite two-stage objectives plus MSE/BCE transfer losses.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Bindings, RegressionHead, TinyEncoder};

/// For an (anchor, positive) pair: every sample whose label distance to the
/// anchor is at least the positive's label distance (ties included). The
/// positive itself always qualifies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    pub anchor: usize,
    pub positive: usize,
    pub members: Vec<usize>,
}

/// S = { l != anchor : |y_anchor - y_l| >= |y_anchor - y_positive| }.
pub fn negative_set(labels: &[f64], anchor: usize, positive: usize) -> Result<NegativeSet> {
    if anchor == positive {
        return Err(Error::Domain {
            op: "negative_set",
            detail: format!("anchor and positive are both {anchor}"),
        });
    }
    if anchor >= labels.len() || positive >= labels.len() {
        return Err(Error::Domain {
            op: "negative_set",
            detail: format!(
                "indices ({anchor}, {positive}) out of range for {} labels",
                labels.len()
            ),
        });
    }
    let threshold = (labels[anchor] - labels[positive]).abs();
    let members = (0..labels.len())
        .filter(|&l| l != anchor && (labels[anchor] - labels[l]).abs() >= threshold)
        .collect();
    Ok(NegativeSet {
        anchor,
        positive,
        members,
    })
}

/// One contrastive batch: embeddings (2N x C_E), labels (2N), temperature.
pub struct RnCBatch {
    pub embeddings: Var,
    pub labels: Vec<f64>,
    pub tau: f64,
}

impl RnCBatch {
    pub fn new(embeddings: Var, labels: Vec<f64>, tau: f64) -> Result<Self> {
        let batch = Self {
            embeddings,
            labels,
            tau,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Domain {
                op: "rnc_loss",
                detail: format!("temperature {} must be positive", self.tau),
            });
        }
        let shape = self.embeddings.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::ShapeMismatch {
                op: "rnc_loss",
                detail: format!("embeddings must be (2N >= 2) x C, got {shape:?}"),
            });
        }
        if shape[0] != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "rnc_loss",
                detail: format!("{} embedding rows vs {} labels", shape[0], self.labels.len()),
            });
        }
        if self.labels.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain {
                op: "rnc_loss",
                detail: "non-finite label".into(),
            });
        }
        Ok(())
    }
}

/// Ranking contrastive loss, averaged over all ordered (anchor, positive)
/// pairs:
///
///   L = 1/(2N(2N-1)) * sum_n sum_{m != n} -log( s(E_n, E_m) / sum_{l in S} s(E_n, E_l) )
///
/// with s(A, B) = exp(-L2(A, B) / tau). Each pair's term is evaluated in log
/// space as d(n,m)/tau + logsumexp_{l in S}(-d(n,l)/tau), so huge distances
/// or tiny temperatures never overflow. Differentiable w.r.t. the embeddings.
pub fn rnc_loss(batch: &RnCBatch) -> Result<Var> {
    batch.validate()?;
    let n2 = batch.labels.len();
    let distances = batch.embeddings.pairwise_l2()?;
    let scaled = distances.scale(-1.0 / batch.tau)?;
    let mut terms = Vec::with_capacity(n2 * (n2 - 1));
    for anchor in 0..n2 {
        for positive in 0..n2 {
            if positive == anchor {
                continue;
            }
            let set = negative_set(&batch.labels, anchor, positive)?;
            let idx: Vec<usize> = set.members.iter().map(|&l| anchor * n2 + l).collect();
            let lse = scaled.gather(&idx)?.logsumexp(0)?;
            let pos = scaled.gather(&[anchor * n2 + positive])?.reshape(vec![])?;
            terms.push(lse.sub(&pos)?);
        }
    }
    let stacked = batch.embeddings.tape().stack_scalars(&terms)?;
    stacked.mean()
}

/// Mean absolute error; the subgradient at zero is zero (from `abs`).
pub fn l1_loss(pred: &Var, target: &Var) -> Result<Var> {
    pred.sub(target)?.abs()?.mean()
}

/// Mean squared error.
pub fn mse_loss(pred: &Var, target: &Var) -> Result<Var> {
    let diff = pred.sub(target)?;
    diff.mul(&diff)?.mean()
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy on probabilities clamped to [eps, 1-eps].
/// Targets must be exactly 0 or 1.
pub fn bce_loss(prob: &Var, targets: &[f64]) -> Result<Var> {
    if targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return Err(Error::Domain {
            op: "bce_loss",
            detail: "targets must be 0 or 1".into(),
        });
    }
    let shape = prob.shape();
    let n: usize = shape.iter().product();
    if n != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            detail: format!("{n} probabilities vs {} targets", targets.len()),
        });
    }
    let tape = prob.tape().clone();
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let t = tape.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let ones = tape.constant(Tensor::full(&shape, 1.0));
    let pos = t.mul(&p.log()?)?;
    let neg = ones.sub(&t)?.mul(&ones.sub(&p)?.log()?)?;
    pos.add(&neg)?.mean()?.scale(-1.0)
}

/// Stage-1 composite objective with its pieces exposed.
pub struct Stage1Loss {
    pub total: Var,
    pub rnc: Var,
    pub l1: Var,
    /// Head predictions on the stop-gradient embeddings, one per row.
    pub predictions: Var,
}

/// L_RnC(E, y, tau) + L1(head(SG(E)), y).
///
/// The stop-gradient between the embeddings and the head means backward
/// sends contrastive gradients to the encoder and regression gradients to
/// the head only.
pub fn stage1_loss(
    embeddings: &Var,
    labels: &[f64],
    tau: f64,
    head: &mut RegressionHead,
    bindings: &mut Bindings,
    rng: &mut impl Rng,
) -> Result<Stage1Loss> {
    let tape = embeddings.tape().clone();
    let rnc = rnc_loss(&RnCBatch::new(embeddings.clone(), labels.to_vec(), tau)?)?;
    let isolated = embeddings.stop_gradient();
    let predictions = head.forward_train(&tape, bindings, &isolated, rng)?;
    let target = tape.constant(Tensor::from_vec(labels.to_vec()));
    let l1 = l1_loss(&predictions, &target)?;
    let total = rnc.add(&l1)?;
    Ok(Stage1Loss {
        total,
        rnc,
        l1,
        predictions,
    })
}

/// Stage-2 objective: L1 over single-clip predictions from the frozen
/// encoder; backward reaches head parameters only.
pub fn stage2_loss(
    clips: &Tensor,
    labels: &[f64],
    encoder: &TinyEncoder,
    head: &mut RegressionHead,
    tape: &Tape,
    bindings: &mut Bindings,
    rng: &mut impl Rng,
) -> Result<(Var, Var)> {
    if !encoder.is_frozen() {
        return Err(Error::Config(
            "stage-2 requires the encoder to be frozen (non-trainable)".into(),
        ));
    }
    let x = tape.constant(clips.clone());
    let embeddings = encoder.forward_eval(tape, bindings, &x)?;
    let isolated = embeddings.stop_gradient();
    let predictions = head.forward_train(tape, bindings, &isolated, rng)?;
    let target = tape.constant(Tensor::from_vec(labels.to_vec()));
    let loss = l1_loss(&predictions, &target)?;
    Ok((loss, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::model::{ClipShape, EncoderConfig, HeadTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Brute-force oracle: explicit triple loop, direct exp-ratio arithmetic,
    /// no log-space tricks. Must stay independent of the tape implementation.
    fn naive_rnc(emb: &Tensor, labels: &[f64], tau: f64) -> f64 {
        let n2 = labels.len();
        let d = emb.shape()[1];
        let dist = |i: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for k in 0..d {
                let diff = emb.data()[i * d + k] - emb.data()[j * d + k];
                s += diff * diff;
            }
            s.sqrt()
        };
        let sim = |i: usize, j: usize| (-dist(i, j) / tau).exp();
        let mut total = 0.0;
        for n in 0..n2 {
            for m in 0..n2 {
                if m == n {
                    continue;
                }
                let thr = (labels[n] - labels[m]).abs();
                let mut denom = 0.0;
                for l in 0..n2 {
                    if l != n && (labels[n] - labels[l]).abs() >= thr {
                        denom += sim(n, l);
                    }
                }
                total += -(sim(n, m) / denom).ln();
            }
        }
        total / (n2 * (n2 - 1)) as f64
    }

    fn random_embeddings(rng: &mut ChaCha8Rng, rows: usize, cols: usize, span: f64) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-span..span)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn negative_set_enumerated_cases() {
        // labels [10,10,50,50]: anchor 0 with positive 2 (distance 40)
        // admits exactly the two far samples.
        let labels = [10.0, 10.0, 50.0, 50.0];
        let s = negative_set(&labels, 0, 2).unwrap();
        assert_eq!(s.members, vec![2, 3]);
        // Zero anchor-positive distance admits every l != anchor.
        let s = negative_set(&labels, 0, 1).unwrap();
        assert_eq!(s.members, vec![1, 2, 3]);
        // 2N = 2: only one candidate.
        let s = negative_set(&[7.0, 7.0], 0, 1).unwrap();
        assert_eq!(s.members, vec![1]);
        assert!(negative_set(&labels, 1, 1).is_err());
        assert!(negative_set(&labels, 0, 9).is_err());
    }

    #[test]
    fn negative_set_always_contains_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..10usize);
            let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let a = rng.gen_range(0..n);
            let mut p = rng.gen_range(0..n);
            if p == a {
                p = (p + 1) % n;
            }
            let s = negative_set(&labels, a, p).unwrap();
            assert!(s.members.contains(&p));
            assert!(!s.members.contains(&a));
        }
    }

    #[test]
    fn rnc_two_rows_equal_labels_is_exactly_zero() {
        let tape = Tape::new();
        let e = tape.leaf(Tensor::matrix(2, 3, vec![0.3, 1.0, -2.0, 4.0, 0.0, 1.5]).unwrap(), true);
        let batch = RnCBatch::new(e, vec![42.0, 42.0], 1.0).unwrap();
        let loss = rnc_loss(&batch).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn rnc_identical_embeddings_closed_form() {
        // labels [0,0,1,1], all embeddings identical:
        // loss = (log 3 + 2 log 2) / 3 by enumerating the twelve ordered pairs.
        let tape = Tape::new();
        let e = tape.leaf(Tensor::matrix(4, 5, vec![0.7; 20]).unwrap(), true);
        let batch = RnCBatch::new(e, vec![0.0, 0.0, 1.0, 1.0], 1.0).unwrap();
        let loss = rnc_loss(&batch).unwrap();
        let expect = (3.0_f64.ln() + 2.0 * 2.0_f64.ln()) / 3.0;
        assert!(close(loss.item(), expect, 1e-12), "{} vs {expect}", loss.item());
    }

    #[test]
    fn rnc_matches_naive_oracle_on_seeded_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let emb = random_embeddings(&mut rng, 8, 4, 3.0);
        let labels: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..100.0)).collect();
        let oracle = naive_rnc(&emb, &labels, 1.0);
        let tape = Tape::new();
        let e = tape.constant(emb);
        let loss = rnc_loss(&RnCBatch::new(e, labels, 1.0).unwrap()).unwrap();
        assert!(close(loss.item(), oracle, 1e-9), "{} vs {oracle}", loss.item());
    }

    #[test]
    fn rnc_permutation_and_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = random_embeddings(&mut rng, 6, 3, 2.0);
        let labels: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..50.0)).collect();
        let base = {
            let tape = Tape::new();
            let e = tape.constant(emb.clone());
            rnc_loss(&RnCBatch::new(e, labels.clone(), 0.7).unwrap()).unwrap().item()
        };
        // Simultaneous row/label permutation.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pdata = Vec::new();
        for &i in &perm {
            pdata.extend_from_slice(&emb.data()[i * 3..(i + 1) * 3]);
        }
        let plabels: Vec<f64> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = {
            let tape = Tape::new();
            let e = tape.constant(Tensor::matrix(6, 3, pdata).unwrap());
            rnc_loss(&RnCBatch::new(e, plabels, 0.7).unwrap()).unwrap().item()
        };
        assert!(close(base, permuted, 1e-12));
        // Adding a constant vector to every row leaves distances unchanged.
        let mut tdata = emb.data().to_vec();
        for row in 0..6 {
            for k in 0..3 {
                tdata[row * 3 + k] += [10.0, -4.0, 0.5][k];
            }
        }
        let translated = {
            let tape = Tape::new();
            let e = tape.constant(Tensor::matrix(6, 3, tdata).unwrap());
            rnc_loss(&RnCBatch::new(e, labels.clone(), 0.7).unwrap()).unwrap().item()
        };
        assert!(close(base, translated, 1e-12));
    }

    #[test]
    fn rnc_temperature_equals_rescaled_embeddings() {
        // L2 homogeneity: loss(E, tau) == loss(E / tau, 1).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = random_embeddings(&mut rng, 6, 4, 2.0);
        let labels: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..50.0)).collect();
        for tau in [0.25, 2.0, 10.0] {
            let with_tau = {
                let tape = Tape::new();
                let e = tape.constant(emb.clone());
                rnc_loss(&RnCBatch::new(e, labels.clone(), tau).unwrap()).unwrap().item()
            };
            let rescaled = {
                let tape = Tape::new();
                let e = tape.constant(emb.map(|v| v / tau));
                rnc_loss(&RnCBatch::new(e, labels.clone(), 1.0).unwrap()).unwrap().item()
            };
            assert!(close(with_tau, rescaled, 1e-10), "tau {tau}: {with_tau} vs {rescaled}");
        }
    }

    #[test]
    fn rnc_log_space_survives_extreme_scales() {
        // Distances up to 1e6 with tau down to 1e-3 stay finite.
        let tape = Tape::new();
        let e = tape.constant(
            Tensor::matrix(4, 2, vec![0.0, 0.0, 1e6, 0.0, 0.0, 1e6, 7e5, 7e5]).unwrap(),
        );
        let batch = RnCBatch::new(e, vec![0.0, 30.0, 60.0, 90.0], 1e-3).unwrap();
        let loss = rnc_loss(&batch).unwrap();
        assert!(loss.item().is_finite());
    }

    #[test]
    fn rnc_rejects_bad_batches() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(RnCBatch::new(e.clone(), vec![1.0, 2.0], 0.0).is_err());
        assert!(RnCBatch::new(e.clone(), vec![1.0], 1.0).is_err());
        let one = tape.constant(Tensor::matrix(1, 2, vec![0.0; 2]).unwrap());
        assert!(RnCBatch::new(one, vec![1.0], 1.0).is_err());
    }

    #[test]
    fn l1_hand_values_and_gradient_sign() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, 3.0]), true);
        let t = tape.constant(Tensor::from_vec(vec![2.0, 5.0]));
        let loss = l1_loss(&p, &t).unwrap();
        assert!(close(loss.item(), 1.5, 1e-15));
        loss.backward().unwrap();
        // d/dpred = sign(pred - target) / len
        assert_eq!(p.grad().unwrap().data(), &[-0.5, -0.5]);

        let tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(vec![4.0, -1.0]));
        let loss = l1_loss(&p, &p.clone()).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let params = vec![("pred".to_string(), Tensor::from_vec(vec![1.3, -0.4, 2.2]))];
        let report = grad_check(
            |tape, vars| {
                let t = tape.constant(Tensor::from_vec(vec![0.9, 0.1, -1.0]));
                l1_loss(&vars[0], &t)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }

    #[test]
    fn mse_and_bce_hand_values() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        assert_eq!(mse_loss(&p, &p.clone()).unwrap().item(), 0.0);

        let half = tape.constant(Tensor::from_vec(vec![0.5]));
        let b = bce_loss(&half, &[1.0]).unwrap();
        assert!(close(b.item(), 2.0_f64.ln(), 1e-12));
        let b0 = bce_loss(&half, &[0.0]).unwrap();
        assert!(close(b0.item(), 2.0_f64.ln(), 1e-12));

        let p9 = tape.constant(Tensor::from_vec(vec![0.9]));
        let b9 = bce_loss(&p9, &[1.0]).unwrap();
        assert!(close(b9.item(), -(0.9_f64.ln()), 1e-12));

        assert!(bce_loss(&p9, &[0.5]).is_err());
    }

    fn tiny_encoder_config() -> EncoderConfig {
        EncoderConfig {
            clip: ClipShape {
                frames: 4,
                height: 6,
                width: 6,
                channels: 1,
            },
            widths: vec![2, 3],
            embed_dim: 5,
            temporal_stride: 2,
        }
    }

    fn random_clips(rng: &mut ChaCha8Rng, batch: usize) -> Tensor {
        let n = batch * 4 * 6 * 6;
        Tensor::new(
            vec![batch, 4, 6, 6, 1],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage1_total_decomposes_into_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut encoder = TinyEncoder::init(tiny_encoder_config(), 1).unwrap();
        let clips = random_clips(&mut rng, 4);
        let labels = vec![10.0, 10.0, 60.0, 60.0];

        let tape = Tape::new();
        let mut bindings = Bindings::new();
        let x = tape.constant(clips.clone());
        let e = encoder.forward_train(&tape, &mut bindings, &x).unwrap();
        let mut head = RegressionHead::init(5, 0.4, HeadTask::Regression, 2).unwrap();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let out = stage1_loss(&e, &labels, 1.0, &mut head, &mut bindings, &mut drop_rng).unwrap();
        let total = out.total.item();
        assert!(close(total, out.rnc.item() + out.l1.item(), 1e-12));

        // Components recomputed independently agree.
        let rnc_alone = rnc_loss(&RnCBatch::new(e.clone(), labels.clone(), 1.0).unwrap())
            .unwrap()
            .item();
        assert!(close(out.rnc.item(), rnc_alone, 1e-12));
    }

    #[test]
    fn stage1_gradient_partition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = tiny_encoder_config();
        let clips = random_clips(&mut rng, 4);
        let labels = vec![20.0, 20.0, 70.0, 70.0];

        // Full loss: encoder grads must equal the rnc-only graph's bitwise,
        // head grads must equal the l1-only graph's bitwise.
        let run = |mode: u8| -> (Vec<(String, Vec<f64>)>, Vec<(String, Vec<f64>)>) {
            let mut encoder = TinyEncoder::init(cfg.clone(), 1).unwrap();
            let mut head = RegressionHead::init(5, 0.4, HeadTask::Regression, 2).unwrap();
            let tape = Tape::new();
            let mut bindings = Bindings::new();
            let x = tape.constant(clips.clone());
            let e = encoder.forward_train(&tape, &mut bindings, &x).unwrap();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
            let parts = stage1_loss(&e, &labels, 1.0, &mut head, &mut bindings, &mut drop_rng)
                .unwrap();
            let root = match mode {
                0 => parts.total,
                1 => parts.rnc,
                _ => parts.l1,
            };
            root.backward().unwrap();
            let enc: Vec<(String, Vec<f64>)> = encoder
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        bindings.grad_or_zeros(&p.name).unwrap().data().to_vec(),
                    )
                })
                .collect();
            let hd: Vec<(String, Vec<f64>)> = head
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        bindings.grad_or_zeros(&p.name).unwrap().data().to_vec(),
                    )
                })
                .collect();
            (enc, hd)
        };

        let (enc_full, head_full) = run(0);
        let (enc_rnc, head_rnc) = run(1);
        let (enc_l1, head_l1) = run(2);

        // Encoder grads come only from the contrastive branch.
        assert_eq!(enc_full, enc_rnc);
        // Encoder grads from the L1 branch are exactly zero.
        for (name, g) in &enc_l1 {
            assert!(g.iter().all(|v| *v == 0.0), "{name} leaked L1 gradient");
        }
        // Head grads come only from the regression branch.
        assert_eq!(head_full, head_l1);
        for (name, g) in &head_rnc {
            assert!(g.iter().all(|v| *v == 0.0), "{name} received RnC gradient");
        }
        // And the full-loss head grads are not all zero (the head does learn).
        assert!(head_full.iter().any(|(_, g)| g.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn stage2_requires_frozen_encoder_and_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut encoder = TinyEncoder::init(tiny_encoder_config(), 1).unwrap();
        let clips = random_clips(&mut rng, 3);
        let labels = vec![15.0, 45.0, 80.0];
        let mut head = RegressionHead::init(5, 0.0, HeadTask::Regression, 2).unwrap();

        // Trainable encoder is a configuration error.
        {
            let tape = Tape::new();
            let mut bindings = Bindings::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
            let err = stage2_loss(
                &clips,
                &labels,
                &encoder,
                &mut head,
                &tape,
                &mut bindings,
                &mut drop_rng,
            )
            .unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }

        encoder.set_trainable(false);
        let tape = Tape::new();
        let mut bindings = Bindings::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
        let (loss, _) = stage2_loss(
            &clips,
            &labels,
            &encoder,
            &mut head,
            &tape,
            &mut bindings,
            &mut drop_rng,
        )
        .unwrap();

        // Value equals l1_loss(head(E), y) for precomputed embeddings.
        let e = encoder.encode_eval(&clips).unwrap();
        let tape2 = Tape::new();
        let mut b2 = Bindings::new();
        let ev = tape2.constant(e);
        let mut head2 = head.clone();
        let mut drop_rng2 = ChaCha8Rng::seed_from_u64(7);
        let preds = head2
            .forward_train(&tape2, &mut b2, &ev.stop_gradient(), &mut drop_rng2)
            .unwrap();
        let target = tape2.constant(Tensor::from_vec(labels.clone()));
        let oracle = l1_loss(&preds, &target).unwrap();
        assert!(close(loss.item(), oracle.item(), 1e-9));

        // Backward reaches head parameters only; encoder stays untouched.
        loss.backward().unwrap();
        for p in encoder.params() {
            assert!(bindings.grad_or_zeros(&p.name).unwrap().data().iter().all(|v| *v == 0.0));
        }
        let head_nonzero = head
            .params()
            .iter()
            .any(|p| bindings.grad_or_zeros(&p.name).unwrap().data().iter().any(|v| *v != 0.0));
        assert!(head_nonzero);
    }

    #[test]
    fn rnc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let emb = random_embeddings(&mut rng, 6, 3, 1.5);
        let labels: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..100.0)).collect();
        let params = vec![("embeddings".to_string(), emb)];
        let labels2 = labels.clone();
        let report = grad_check(
            move |_tape, vars| {
                rnc_loss(&RnCBatch::new(vars[0].clone(), labels2.clone(), 0.8)?)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }
}
