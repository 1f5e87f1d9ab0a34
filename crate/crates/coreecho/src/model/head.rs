//! The two-layer MLP head:
//! y = W2 [ g(BN2(W1 [BN1(E); 1])); 1 ], dropout before every linear layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::param::{fan_in_uniform, BatchNormLayer, Bindings, Parameter};
use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::util::mix_seed;

/// What the scalar head output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadTask {
    /// Raw scalar regression output.
    Regression,
    /// Sigmoid on the scalar: probability of the positive class.
    Classification,
}

#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub bn1: BatchNormLayer,
    /// (embed_dim x embed_dim+1), bias column last.
    pub w1: Parameter,
    pub bn2: BatchNormLayer,
    /// (1 x embed_dim+1), bias column last.
    pub w2: Parameter,
    pub dropout: f64,
    pub task: HeadTask,
}

impl RegressionHead {
    pub fn init(embed_dim: usize, dropout: f64, task: HeadTask, seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("head embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x4EAD]));
        Ok(Self {
            bn1: BatchNormLayer::new("head.bn1", embed_dim),
            w1: Parameter::new(
                "head.w1",
                fan_in_uniform(&mut rng, &[embed_dim, embed_dim + 1], embed_dim),
            ),
            bn2: BatchNormLayer::new("head.bn2", embed_dim),
            w2: Parameter::new(
                "head.w2",
                fan_in_uniform(&mut rng, &[1, embed_dim + 1], embed_dim),
            ),
            dropout,
            task,
        })
    }

    fn finish(&self, linear_out: Var) -> Result<Var> {
        let batch = linear_out.shape()[0];
        let scalar_per_row = linear_out.reshape(vec![batch])?;
        match self.task {
            HeadTask::Regression => Ok(scalar_per_row),
            HeadTask::Classification => scalar_per_row.sigmoid(),
        }
    }

    /// Train-mode forward: batch statistics, live dropout. Needs batch >= 2.
    pub fn forward_train(
        &mut self,
        tape: &Tape,
        bindings: &mut Bindings,
        embeddings: &Var,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let x = self.bn1.train_forward(tape, bindings, embeddings)?;
        let x = x.dropout(self.dropout, Mode::Train, rng)?;
        let w1 = bindings.bind(tape, &self.w1);
        let x = x.affine(&w1)?;
        let x = self.bn2.train_forward(tape, bindings, &x)?;
        let x = x.gelu()?;
        let x = x.dropout(self.dropout, Mode::Train, rng)?;
        let w2 = bindings.bind(tape, &self.w2);
        self.finish(x.affine(&w2)?)
    }

    /// Eval-mode forward: running statistics, dropout off; deterministic.
    pub fn forward_eval(
        &self,
        tape: &Tape,
        bindings: &mut Bindings,
        embeddings: &Var,
    ) -> Result<Var> {
        let x = self.bn1.eval_forward(tape, bindings, embeddings)?;
        let w1 = bindings.bind(tape, &self.w1);
        let x = x.affine(&w1)?;
        let x = self.bn2.eval_forward(tape, bindings, &x)?;
        let x = x.gelu()?;
        let w2 = bindings.bind(tape, &self.w2);
        self.finish(x.affine(&w2)?)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.bn1.scale,
            &self.bn1.shift,
            &self.w1,
            &self.bn2.scale,
            &self.bn2.shift,
            &self.w2,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.bn1.scale,
            &mut self.bn1.shift,
            &mut self.w1,
            &mut self.bn2.scale,
            &mut self.bn2.shift,
            &mut self.w2,
        ]
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for p in self.params() {
            out.push((
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.data().to_vec(),
            ));
        }
        out.push((
            "head.bn1.running_mean".into(),
            vec![self.bn1.running_mean.len()],
            self.bn1.running_mean.clone(),
        ));
        out.push((
            "head.bn1.running_var".into(),
            vec![self.bn1.running_var.len()],
            self.bn1.running_var.clone(),
        ));
        out.push((
            "head.bn2.running_mean".into(),
            vec![self.bn2.running_mean.len()],
            self.bn2.running_mean.clone(),
        ));
        out.push((
            "head.bn2.running_var".into(),
            vec![self.bn2.running_var.len()],
            self.bn2.running_var.clone(),
        ));
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use crate::autodiff::Tensor;
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>)> {
            entries
                .iter()
                .find(|e| e.0 == name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name} in state")))
        };
        for p in self.params_mut() {
            let e = find(&p.name.clone())?;
            p.value = Tensor::new(e.1.clone(), e.2.clone())?;
        }
        self.bn1.running_mean = find("head.bn1.running_mean")?.2.clone();
        self.bn1.running_var = find("head.bn1.running_var")?.2.clone();
        self.bn2.running_mean = find("head.bn2.running_mean")?.2.clone();
        self.bn2.running_var = find("head.bn2.running_var")?.2.clone();
        Ok(())
    }
}
