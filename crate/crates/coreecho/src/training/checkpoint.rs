//! `CRCK` checkpoint files.
//!
//! Layout: magic `CRCK`, version u16 LE, header-length u32 LE, JSON header
//! (config snapshot, label normalization, progress cursor, tensor directory
//! with name/shape/offset), then contiguous little-endian f64 payloads in
//! directory order. Round trips are bitwise.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::evaluation::LabelNorm;

use super::config::PipelineConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// How far a run has advanced, for resumption at epoch granularity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub stage1_done: usize,
    pub stage2_done: usize,
    pub transfer_done: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: PipelineConfig,
    label_norm: Option<LabelNorm>,
    progress: TrainProgress,
    tensors: Vec<TensorEntry>,
}

/// Fully decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub label_norm: Option<LabelNorm>,
    pub progress: TrainProgress,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &ckpt.tensors {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: shape {shape:?} vs {} values",
                data.len()
            ))
            .into());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = Header {
        config: ckpt.config.clone(),
        label_norm: ckpt.label_norm,
        progress: ckpt.progress,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, _, data) in &ckpt.tensors {
        for v in data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes is too short for a header",
            bytes.len()
        ))
        .into());
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let header_end = 10 + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated("header runs past end of file".into()).into());
    }
    let header: Header = serde_json::from_slice(&bytes[10..header_end])
        .map_err(|e| Error::from(CheckpointError::Corrupt(format!("header json: {e}"))))?;

    let payload = &bytes[header_end..];
    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total as usize * 8 {
        return Err(CheckpointError::Truncated(format!(
            "payload {} bytes, directory implies {}",
            payload.len(),
            total * 8
        ))
        .into());
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let expected: usize = entry.shape.iter().product();
        if expected != entry.len as usize {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {}: shape {:?} vs len {}",
                entry.name, entry.shape, entry.len
            ))
            .into());
        }
        let start = entry.offset as usize * 8;
        let end = start + entry.len as usize * 8;
        if end > payload.len() {
            return Err(
                CheckpointError::Corrupt(format!("tensor {} offset out of range", entry.name))
                    .into(),
            );
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), entry.shape.clone(), data));
    }
    Ok(Checkpoint {
        config: header.config,
        label_norm: header.label_norm,
        progress: header.progress,
        tensors,
    })
}
