//! Video records and the `VTEN` binary tensor file format.
//!
//! Layout: magic `VTEN`, version u16, then u16 frames/height/width/channels,
//! then frames*height*width*channels unsigned bytes (row-major, frame-major).
//! All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::manifest::Split;
use crate::error::{Error, Result};

pub const VTEN_MAGIC: &[u8; 4] = b"VTEN";
pub const VTEN_VERSION: u16 = 1;

/// A variable-length video with its label and split assignment. Pixels stay
/// u8 in memory; clips convert to [0,1] reals on extraction.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub label: f64,
    pub split: Split,
}

impl VideoRecord {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// One frame as [0,1] reals.
    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        let fl = self.frame_len();
        self.pixels[t * fl..(t + 1) * fl]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect()
    }

    /// The whole video as a (frames, height, width, channels) tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(
            vec![self.frames, self.height, self.width, self.channels],
            data,
        )
        .expect("record dims consistent")
    }

    pub fn write_vten(&self, path: &Path) -> Result<()> {
        write_vten(
            path,
            self.frames,
            self.height,
            self.width,
            self.channels,
            &self.pixels,
        )
    }
}

pub fn write_vten(
    path: &Path,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: &[u8],
) -> Result<()> {
    if frames * height * width * channels != pixels.len() {
        return Err(Error::Data(format!(
            "vten payload {} does not match dims {}x{}x{}x{}",
            pixels.len(),
            frames,
            height,
            width,
            channels
        )));
    }
    let too_big = [frames, height, width, channels]
        .iter()
        .any(|&d| d > u16::MAX as usize);
    if too_big {
        return Err(Error::Data("vten dims exceed u16".into()));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(VTEN_MAGIC)?;
    f.write_all(&VTEN_VERSION.to_le_bytes())?;
    for d in [frames, height, width, channels] {
        f.write_all(&(d as u16).to_le_bytes())?;
    }
    f.write_all(pixels)?;
    Ok(())
}

/// Raw decode: dims plus pixel payload.
pub fn read_vten(path: &Path) -> Result<(usize, usize, usize, usize, Vec<u8>)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{}: truncated vten header", path.display())))?;
    if &magic != VTEN_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad vten magic {magic:?}",
            path.display()
        )));
    }
    let mut buf2 = [0u8; 2];
    let mut read_u16 = |f: &mut fs::File| -> Result<u16> {
        f.read_exact(&mut buf2)
            .map_err(|_| Error::Data(format!("{}: truncated vten header", path.display())))?;
        Ok(u16::from_le_bytes(buf2))
    };
    let version = read_u16(&mut f)?;
    if version != VTEN_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported vten version {version}",
            path.display()
        )));
    }
    let frames = read_u16(&mut f)? as usize;
    let height = read_u16(&mut f)? as usize;
    let width = read_u16(&mut f)? as usize;
    let channels = read_u16(&mut f)? as usize;
    let expected = frames * height * width * channels;
    let mut pixels = Vec::with_capacity(expected);
    f.read_to_end(&mut pixels)?;
    if pixels.len() != expected {
        return Err(Error::Data(format!(
            "{}: payload {} bytes, dims imply {expected}",
            path.display(),
            pixels.len()
        )));
    }
    Ok((frames, height, width, channels, pixels))
}
