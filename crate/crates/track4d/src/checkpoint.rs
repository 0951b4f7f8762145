//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `T4DCKPT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter as a little-endian `f64` in
//! block order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use track4d_core::encoding::FourierTimeConfig;
use track4d_core::learn::TrainConfig;
use track4d_core::model::{Model, ModelDims};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"T4DCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dims: ModelDims,
    pub frequencies: FourierTimeConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    pub train: TrainConfig,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, init_seed: u64, train: TrainConfig) -> Self {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            dims: model.dims(),
            frequencies: model.fourier.clone(),
            init_seed,
            train,
            blocks: model
                .blocks()
                .into_iter()
                .map(|(name, p)| BlockInfo { name, len: p.len() })
                .collect(),
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let params = self.model.to_flat();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| corrupt("truncated header"))?;
        if body.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {}", header.format_version)));
        }
        let mut model = Model::zeros(header.dims, header.frequencies.clone())?;
        let layout: Vec<BlockInfo> = model
            .blocks()
            .into_iter()
            .map(|(name, p)| BlockInfo { name, len: p.len() })
            .collect();
        if layout != header.blocks {
            return Err(corrupt("block layout does not match the recorded dimensions"));
        }
        let data = &body[len..];
        if data.len() != 8 * model.num_parameters() {
            return Err(corrupt(&format!(
                "expected {} parameters, found {} bytes",
                model.num_parameters(),
                data.len()
            )));
        }
        let flat: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.assign_flat(&flat)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}
