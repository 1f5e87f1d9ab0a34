//! Encoder and regression head.

mod encoder;
mod head;
mod param;

pub use encoder::{ClipShape, ConvBlock, EncoderConfig, TinyEncoder};
pub use head::{HeadTask, RegressionHead};
pub use param::{check_unique_names, fan_in_uniform, BatchNormLayer, Bindings, Parameter};

use crate::error::Result;
use crate::util::fnv1a;

/// Encoder plus head, the unit that trains and checkpoints together.
#[derive(Clone, Debug)]
pub struct CoReEchoModel {
    pub encoder: TinyEncoder,
    pub head: RegressionHead,
}

impl CoReEchoModel {
    pub fn init(
        cfg: EncoderConfig,
        dropout: f64,
        task: HeadTask,
        seed: u64,
    ) -> Result<Self> {
        let encoder = TinyEncoder::init(cfg.clone(), seed)?;
        let head = RegressionHead::init(cfg.embed_dim, dropout, task, seed)?;
        let model = Self { encoder, head };
        check_unique_names(model.params().into_iter())?;
        Ok(model)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.encoder.params();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    /// All tensors that belong in a checkpoint, in a stable order.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = self.encoder.state_entries();
        out.extend(self.head.state_entries());
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        self.encoder.load_state(entries)?;
        self.head.load_state(entries)
    }

    /// FNV-1a over every encoder tensor byte (params and running stats);
    /// freeze assertions compare this before/after training stages.
    pub fn encoder_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, _, data) in self.encoder.state_entries() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn head_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, _, data) in self.head.state_entries() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}
