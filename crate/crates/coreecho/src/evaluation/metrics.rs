//! Regression and classification metric reports.

use crate::error::{Error, Result};

/// Named metric values for one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub metrics: Vec<(String, f64)>,
    pub count: usize,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    /// Line-oriented key=value rendering.
    pub fn to_kv_lines(&self) -> String {
        let mut out = format!("task={}\ncount={}\n", self.task, self.count);
        for (name, value) in &self.metrics {
            out.push_str(&format!("{name}={value:.6}\n"));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut metrics = serde_json::Map::new();
        for (name, value) in &self.metrics {
            metrics.insert(name.clone(), serde_json::json!(value));
        }
        serde_json::json!({
            "task": self.task,
            "count": self.count,
            "metrics": metrics,
        })
    }
}

/// MAE, RMSE, R2 (reported x100), and Pearson r.
///
/// R2 = 1 - SSE/SST needs positive target variance.
pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<MetricReport> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Domain {
            op: "regression_metrics",
            detail: format!("{} predictions vs {} targets", pred.len(), target.len()),
        });
    }
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let sse = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>();
    let rmse = (sse / n).sqrt();
    let t_mean = target.iter().sum::<f64>() / n;
    let sst = target.iter().map(|t| (t - t_mean) * (t - t_mean)).sum::<f64>();
    if sst <= 0.0 {
        return Err(Error::Domain {
            op: "regression_metrics",
            detail: "zero target variance, R2 undefined".into(),
        });
    }
    let r2 = (1.0 - sse / sst) * 100.0;

    let p_mean = pred.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut p_var = 0.0;
    for (p, t) in pred.iter().zip(target) {
        cov += (p - p_mean) * (t - t_mean);
        p_var += (p - p_mean) * (p - p_mean);
    }
    let pearson = if p_var > 0.0 {
        cov / (p_var.sqrt() * sst.sqrt())
    } else {
        0.0
    };

    Ok(MetricReport {
        task: "regression".into(),
        metrics: vec![
            ("MAE".into(), mae),
            ("RMSE".into(), rmse),
            ("R2".into(), r2),
            ("Pearson".into(), pearson),
        ],
        count: pred.len(),
    })
}

/// Confusion-matrix metrics at a probability threshold. Zero-denominator
/// conventions: precision and F1 are 0 when nothing is predicted positive,
/// sensitivity 0 without positives, specificity 1 without negatives.
pub fn classification_metrics(
    prob: &[f64],
    target: &[f64],
    threshold: f64,
) -> Result<MetricReport> {
    if prob.len() != target.len() || prob.is_empty() {
        return Err(Error::Domain {
            op: "classification_metrics",
            detail: format!("{} probabilities vs {} targets", prob.len(), target.len()),
        });
    }
    if target.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return Err(Error::Domain {
            op: "classification_metrics",
            detail: "targets must be 0 or 1".into(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in prob.iter().zip(target) {
        let hat = *p >= threshold;
        match (hat, *t == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let sensitivity = div(tp, tp + fne);
    let specificity = if fp + tn == 0 { 1.0 } else { div(tn, tn + fp) };
    let precision = div(tp, tp + fp);
    let f1 = if precision + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    let accuracy = (tp + tn) as f64 / prob.len() as f64;
    Ok(MetricReport {
        task: "classification".into(),
        metrics: vec![
            ("Sensitivity".into(), sensitivity),
            ("Specificity".into(), specificity),
            ("Precision".into(), precision),
            ("F1".into(), f1),
            ("Accuracy".into(), accuracy),
        ],
        count: prob.len(),
    })
}
