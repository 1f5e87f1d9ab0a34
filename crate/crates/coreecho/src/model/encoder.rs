//! Small pluggable spatiotemporal encoder: stacked {3-D conv, batch norm,
//! GELU} blocks, global average pooling, and a final linear map to the
//! embedding width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::param::{fan_in_uniform, BatchNormLayer, Bindings, Parameter};
use crate::autodiff::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::util::mix_seed;

/// Input clip geometry, channels-last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipShape {
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub clip: ClipShape,
    /// Output channels per conv block (2-3 blocks).
    pub widths: Vec<usize>,
    /// Embedding width C_E.
    pub embed_dim: usize,
    /// Stride along the frame axis in each block; spatial stride is fixed
    /// at 2 per block.
    pub temporal_stride: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() > 3 {
            return Err(Error::Config(format!(
                "encoder wants 1-3 conv blocks, got {}",
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.embed_dim == 0 {
            return Err(Error::Config("encoder widths and embed_dim must be positive".into()));
        }
        if self.temporal_stride == 0 {
            return Err(Error::Config("temporal stride must be positive".into()));
        }
        let [f, h, w, c] = self.clip.dims();
        if f == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Config("clip extents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: Parameter,
    pub bn: BatchNormLayer,
}

/// The stand-in feature extractor. Output is always (batch, embed_dim).
#[derive(Clone, Debug)]
pub struct TinyEncoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    /// Final affine map, (embed_dim x last_width+1) with the bias column.
    pub fc: Parameter,
}

impl TinyEncoder {
    /// Fan-in uniform initialization, bit-reproducible per seed.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xE4C0]));
        let mut blocks = Vec::with_capacity(cfg.widths.len());
        let mut in_ch = cfg.clip.channels;
        for (bi, &out_ch) in cfg.widths.iter().enumerate() {
            let fan_in = 27 * in_ch;
            let weight = Parameter::new(
                format!("encoder.block{bi}.conv"),
                fan_in_uniform(&mut rng, &[out_ch, 3, 3, 3, in_ch], fan_in),
            );
            let bn = BatchNormLayer::new(&format!("encoder.block{bi}.bn"), out_ch);
            blocks.push(ConvBlock { weight, bn });
            in_ch = out_ch;
        }
        let fc = Parameter::new(
            "encoder.fc",
            fan_in_uniform(&mut rng, &[cfg.embed_dim, in_ch + 1], in_ch),
        );
        Ok(Self { cfg, blocks, fc })
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn check_input(&self, clips: &Var) -> Result<usize> {
        let shape = clips.shape();
        let want = self.cfg.clip.dims();
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!("clip batch {shape:?} does not match configured {want:?}"),
            });
        }
        Ok(shape[0])
    }

    pub fn forward_train(
        &mut self,
        tape: &Tape,
        bindings: &mut Bindings,
        clips: &Var,
    ) -> Result<Var> {
        self.check_input(clips)?;
        let stride = [self.cfg.temporal_stride, 2, 2];
        let mut x = clips.clone();
        for block in self.blocks.iter_mut() {
            let w = bindings.bind(tape, &block.weight);
            x = x.conv3d(&w, stride)?;
            x = block.bn.train_forward(tape, bindings, &x)?;
            x = x.gelu()?;
        }
        let pooled = x.global_avg_pool()?;
        let fc = bindings.bind(tape, &self.fc);
        pooled.affine(&fc)
    }

    pub fn forward_eval(&self, tape: &Tape, bindings: &mut Bindings, clips: &Var) -> Result<Var> {
        self.check_input(clips)?;
        let stride = [self.cfg.temporal_stride, 2, 2];
        let mut x = clips.clone();
        for block in self.blocks.iter() {
            let w = bindings.bind(tape, &block.weight);
            x = x.conv3d(&w, stride)?;
            x = block.bn.eval_forward(tape, bindings, &x)?;
            x = x.gelu()?;
        }
        let pooled = x.global_avg_pool()?;
        let fc = bindings.bind(tape, &self.fc);
        pooled.affine(&fc)
    }

    pub fn forward(
        &mut self,
        tape: &Tape,
        bindings: &mut Bindings,
        clips: &Var,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => self.forward_train(tape, bindings, clips),
            Mode::Eval => self.forward_eval(tape, bindings, clips),
        }
    }

    /// Encode a raw clip batch (no gradient tracking).
    pub fn encode_eval(&self, clips: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mut bindings = Bindings::new();
        let x = tape.constant(clips.clone());
        let e = self.forward_eval(&tape, &mut bindings, &x)?;
        Ok(e.value())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bn.scale);
            out.push(&b.bn.shift);
        }
        out.push(&self.fc);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(&mut b.weight);
            out.push(&mut b.bn.scale);
            out.push(&mut b.bn.shift);
        }
        out.push(&mut self.fc);
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable)
    }

    /// Parameter and running-stat payloads, in a stable order, for
    /// serialization and checksums.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            out.push((
                b.weight.name.clone(),
                b.weight.value.shape().to_vec(),
                b.weight.value.data().to_vec(),
            ));
            out.push((
                b.bn.scale.name.clone(),
                b.bn.scale.value.shape().to_vec(),
                b.bn.scale.value.data().to_vec(),
            ));
            out.push((
                b.bn.shift.name.clone(),
                b.bn.shift.value.shape().to_vec(),
                b.bn.shift.value.data().to_vec(),
            ));
            out.push((
                format!("encoder.block{bi}.bn.running_mean"),
                vec![b.bn.running_mean.len()],
                b.bn.running_mean.clone(),
            ));
            out.push((
                format!("encoder.block{bi}.bn.running_var"),
                vec![b.bn.running_var.len()],
                b.bn.running_var.clone(),
            ));
        }
        out.push((
            self.fc.name.clone(),
            self.fc.value.shape().to_vec(),
            self.fc.value.data().to_vec(),
        ));
        out
    }

    /// FNV-1a over all parameter and running-stat bytes; freeze assertions
    /// compare this before and after frozen-encoder stages.
    pub fn state_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, _, data) in self.state_entries() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::util::fnv1a(&bytes)
    }

    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut lookup: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
            std::collections::HashMap::new();
        for e in entries {
            lookup.insert(e.0.as_str(), e);
        }
        let fetch = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>)> {
            lookup
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing tensor {name} in state")))
        };
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            let w = fetch(&b.weight.name)?;
            b.weight.value = Tensor::new(w.1.clone(), w.2.clone())?;
            let s = fetch(&b.bn.scale.name)?;
            b.bn.scale.value = Tensor::new(s.1.clone(), s.2.clone())?;
            let sh = fetch(&b.bn.shift.name)?;
            b.bn.shift.value = Tensor::new(sh.1.clone(), sh.2.clone())?;
            b.bn.running_mean = fetch(&format!("encoder.block{bi}.bn.running_mean"))?.2.clone();
            b.bn.running_var = fetch(&format!("encoder.block{bi}.bn.running_var"))?.2.clone();
        }
        let fc = fetch(&self.fc.name)?;
        self.fc.value = Tensor::new(fc.1.clone(), fc.2.clone())?;
        Ok(())
    }
}
