//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result for one checked parameter.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err > self.tolerance)
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Compare analytic gradients of `builder`'s scalar output against central
/// finite differences over every element of every parameter.
///
/// The builder must be deterministic given the same parameter values (seed
/// any internal randomness per call); this is verified by a double forward
/// evaluation before differencing starts.
pub fn grad_check<F>(
    builder: F,
    params: &[(String, Tensor)],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = builder(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let l0 = eval(&base)?;
    let l1 = eval(&base)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::GradCheck(format!(
            "loss builder is not deterministic: {l0} vs {l1} on identical inputs"
        )));
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = builder(&tape, &vars)?;
    out.backward()?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad_or_zeros()).collect();

    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for ei in 0..base[pi].len() {
            let mut plus = base.to_vec();
            plus[pi].data_mut()[ei] += h;
            let mut minus = base.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = ei;
                worst.worst_analytic = a;
                worst.worst_numeric = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport {
        entries,
        tolerance,
        step: h,
    })
}
