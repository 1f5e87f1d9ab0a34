//! Numeric embedding-continuity diagnostics: triplet ordering violations and
//! k-nearest-neighbor label error.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ContinuityReport {
    pub triplet_violation_rate: f64,
    pub knn_label_mae: f64,
    pub n_triplets: usize,
    pub k: usize,
}

impl ContinuityReport {
    pub fn to_kv_lines(&self) -> String {
        format!(
            "triplet_violation_rate={:.6}\nknn_label_mae={:.6}\nn_triplets={}\nk={}\n",
            self.triplet_violation_rate, self.knn_label_mae, self.n_triplets, self.k
        )
    }
}

fn row_distance(embeddings: &[Vec<f64>], a: usize, b: usize) -> f64 {
    embeddings[a]
        .iter()
        .zip(embeddings[b].iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of random triplets (a, b, c) whose embedding-distance ordering
/// contradicts the label-distance ordering. Triplets with equal label
/// distances are redrawn; ties in embedding distance count as violations.
pub fn triplet_violation_rate(
    embeddings: &[Vec<f64>],
    labels: &[f64],
    n_triplets: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = embeddings.len();
    if n < 3 || labels.len() != n {
        return Err(Error::Domain {
            op: "triplet_violation_rate",
            detail: format!("{n} embeddings and {} labels (need >= 3)", labels.len()),
        });
    }
    let mut violations = 0usize;
    let mut drawn = 0usize;
    let mut guard = 0usize;
    while drawn < n_triplets {
        guard += 1;
        if guard > 100 * n_triplets + 1000 {
            return Err(Error::Domain {
                op: "triplet_violation_rate",
                detail: "could not draw label-distinct triplets (labels too degenerate)".into(),
            });
        }
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        if a == b || a == c || b == c {
            continue;
        }
        let lab_ab = (labels[a] - labels[b]).abs();
        let lab_ac = (labels[a] - labels[c]).abs();
        if lab_ab == lab_ac {
            continue;
        }
        let emb_ab = row_distance(embeddings, a, b);
        let emb_ac = row_distance(embeddings, a, c);
        let consistent = if lab_ab < lab_ac {
            emb_ab < emb_ac
        } else {
            emb_ab > emb_ac
        };
        if !consistent {
            violations += 1;
        }
        drawn += 1;
    }
    Ok(violations as f64 / n_triplets as f64)
}

/// Mean over samples of |label - mean label of its k nearest embedding
/// neighbors| (self excluded).
pub fn knn_label_mae(embeddings: &[Vec<f64>], labels: &[f64], k: usize) -> Result<f64> {
    let n = embeddings.len();
    if n != labels.len() || k == 0 || k >= n {
        return Err(Error::Domain {
            op: "knn_label_mae",
            detail: format!("k={k} with {n} samples"),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (row_distance(embeddings, i, j), j))
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let neighbor_mean =
            dist[..k].iter().map(|(_, j)| labels[*j]).sum::<f64>() / k as f64;
        total += (labels[i] - neighbor_mean).abs();
    }
    Ok(total / n as f64)
}
