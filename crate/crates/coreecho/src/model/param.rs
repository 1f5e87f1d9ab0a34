//! Named parameters, per-graph bindings, and the batch-norm layer state.

use rand::Rng;

use crate::autodiff::{BatchStats, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named model parameter. Frozen parameters (`trainable == false`) are
/// never touched by an optimizer step.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }
}

/// Parameter-to-node bindings for one forward graph. Rebuilt every step.
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf the parameter's current value onto the tape and remember the
    /// handle under the parameter's name. A name that is already bound (or
    /// preset) reuses the existing node, so shared parameters accumulate
    /// gradients over every use.
    pub fn bind(&mut self, tape: &Tape, p: &Parameter) -> Var {
        if let Some(v) = self.var(&p.name) {
            return v.clone();
        }
        let var = tape.leaf(p.value.clone(), p.trainable);
        self.entries.push((p.name.clone(), var.clone()));
        var
    }

    /// Pre-seed a binding with an externally built node; later `bind` calls
    /// for that name use it instead of leafing the parameter value. Gradient
    /// checking injects perturbed parameter leaves this way.
    pub fn preset(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    /// Accumulated gradient for a bound parameter, zeros when the backward
    /// pass never reached it.
    pub fn grad_or_zeros(&self, name: &str) -> Option<Tensor> {
        self.var(name).map(|v| v.grad_or_zeros())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Batch normalization layer: trainable scale/shift plus running statistics
/// that are state, not parameters (they move on forward passes, not on
/// optimizer steps).
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub scale: Parameter,
    pub shift: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            scale: Parameter::new(format!("{prefix}.scale"), Tensor::ones(&[channels])),
            shift: Parameter::new(format!("{prefix}.shift"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train-mode forward; folds the batch statistics into the running
    /// estimates (population variance normalizes, unbiased variance updates
    /// the running value).
    pub fn train_forward(
        &mut self,
        tape: &Tape,
        bindings: &mut Bindings,
        x: &Var,
    ) -> Result<Var> {
        let s = bindings.bind(tape, &self.scale);
        let b = bindings.bind(tape, &self.shift);
        let (out, stats) = x.batch_norm_train(&s, &b, self.eps)?;
        self.fold_running(&stats);
        Ok(out)
    }

    pub fn eval_forward(&self, tape: &Tape, bindings: &mut Bindings, x: &Var) -> Result<Var> {
        let s = bindings.bind(tape, &self.scale);
        let b = bindings.bind(tape, &self.shift);
        x.batch_norm_eval(&s, &b, &self.running_mean, &self.running_var, self.eps)
    }

    pub fn forward(
        &mut self,
        tape: &Tape,
        bindings: &mut Bindings,
        x: &Var,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.train_forward(tape, bindings, x),
            Mode::Eval => self.eval_forward(tape, bindings, x),
        }
    }

    fn fold_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.iter_mut().zip(stats.mean.iter()) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(stats.var_unbiased.iter()) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

/// Weights drawn uniformly from (-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Guard: parameter names must be unique within a model.
pub fn check_unique_names<'a>(params: impl Iterator<Item = &'a Parameter>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for p in params {
        if !seen.insert(p.name.clone()) {
            return Err(Error::Config(format!("duplicate parameter name {}", p.name)));
        }
    }
    Ok(())
}
