//! `PTEN` tensor container.
//!
//! Layout: magic `PTEN`, version byte (1), dtype byte (1 = u8, 2 = f32 LE),
//! rank byte, `rank` little-endian u32 dims, then the row-major payload.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTEN";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum PtenData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl PtenData {
    fn dtype(&self) -> u8 {
        match self {
            PtenData::U8(_) => 1,
            PtenData::F32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            PtenData::U8(v) => v.len(),
            PtenData::F32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pten {
    pub shape: Vec<usize>,
    pub data: PtenData,
}

impl Pten {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Self { shape: t.shape().to_vec(), data: PtenData::F32(t.data().to_vec()) }
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self { shape, data: PtenData::U8(data) }
    }

    pub fn into_tensor(self) -> Result<Tensor<f32>> {
        match self.data {
            PtenData::F32(d) => Tensor::new(self.shape, d),
            PtenData::U8(_) => Err(Error::invalid("expected f32 payload, found u8")),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let numel: usize = self.shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!("shape {:?} does not match {} values", self.shape, self.data.len())));
        }
        let rank = u8::try_from(self.shape.len()).map_err(|_| Error::shape("rank exceeds 255"))?;
        let mut out = Vec::with_capacity(7 + 4 * self.shape.len() + 4 * numel);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype());
        out.push(rank);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::shape("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            PtenData::U8(v) => out.extend_from_slice(v),
            PtenData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Decode; error messages describe the problem, the caller adds the file name.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 7 {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err(format!("bad magic {:?}", &bytes[..4]));
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let dtype = bytes[5];
        let elem = match dtype {
            1 => 1,
            2 => 4,
            other => return Err(format!("unknown dtype code {other}")),
        };
        let rank = bytes[6] as usize;
        let header = 7 + 4 * rank;
        if bytes.len() < header {
            return Err("truncated dimension list".into());
        }
        let shape: Vec<usize> =
            bytes[7..header].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("dimension product overflows")?;
        let payload = &bytes[header..];
        if payload.len() != numel * elem {
            return Err(format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), numel * elem));
        }
        let data = match dtype {
            1 => PtenData::U8(payload.to_vec()),
            _ => PtenData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()),
        };
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::parse(path, msg))
    }
}
