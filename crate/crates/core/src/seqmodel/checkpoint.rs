//! Binary checkpoint: magic, little-endian u64 header length, JSON header,
//! then every parameter block as little-endian f32 in header order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::dataio::{write_atomic, NormStats, Schema};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFACTCK\x01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub schema: Schema,
    pub normalization: NormStats,
    /// Integrated-gradients baseline in normalized input space, one value per input column.
    pub ig_baseline: Vec<f64>,
    pub train_config_digest: String,
    pub blocks: Vec<BlockInfo>,
}

/// A trained model together with everything needed to serve it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub schema: Schema,
    pub normalization: NormStats,
    pub ig_baseline: Vec<f64>,
    pub train_config_digest: String,
}

/// Hex SHA-256 of a serializable value's canonical JSON.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ModelCheckpoint {
    /// Parameters are rounded to f32 here so the in-memory model equals what a reload yields.
    pub fn new(
        mut model: Model,
        schema: Schema,
        normalization: NormStats,
        ig_baseline: Vec<f64>,
        train_config_digest: String,
    ) -> Result<Self> {
        if ig_baseline.len() != model.config.encoder.input_width {
            return Err(Error::shape(
                "ig baseline",
                &[model.config.encoder.input_width],
                &[ig_baseline.len()],
            ));
        }
        if schema.input_width() != model.config.encoder.input_width || !normalization.matches(&schema) {
            return Err(Error::Schema("checkpoint schema does not match the model config".into()));
        }
        model.round_to_f32();
        Ok(Self {
            model,
            schema,
            normalization,
            ig_baseline,
            train_config_digest,
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.config.clone(),
            schema: self.schema.clone(),
            normalization: self.normalization.clone(),
            ig_baseline: self.ig_baseline.clone(),
            train_config_digest: self.train_config_digest.clone(),
            blocks: self
                .model
                .named_tensors()
                .into_iter()
                .map(|(name, t)| BlockInfo {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let n_params = self.model.param_count();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * n_params);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.tensors() {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes)?;
        let mut model = Model::new(header.model.clone(), 0)?;
        let expected: Vec<BlockInfo> = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| BlockInfo {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != header.blocks {
            return Err(Error::Checkpoint("parameter blocks do not match the model config".into()));
        }
        let total = model.param_count();
        if body.len() != 4 * total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                4 * total,
                body.len()
            )));
        }
        let mut off = 0;
        for t in model.tensors_mut() {
            let n = t.len();
            let vals: Vec<f32> = body[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *t = Tensor::from_f32(t.shape(), &vals)?;
            off += 4 * n;
        }
        if let Some(i) = model.tensors().iter().position(|t| !t.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite values in block {}", header.blocks[i].name)));
        }
        Ok(Self {
            model,
            schema: header.schema,
            normalization: header.normalization,
            ig_baseline: header.ig_baseline,
            train_config_digest: header.train_config_digest,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + len {
        return Err(Error::Checkpoint("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + len])
        .map_err(|e| Error::Checkpoint(format!("invalid checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    Ok((header, &bytes[16 + len..]))
}

/// Write via a temporary file and rename, so readers never see a partial file.
pub fn write_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

/// Parse only the header (cheap listing of checkpoints).
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    if len > 64 << 20 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut full = head.to_vec();
    full.extend(buf);
    Ok(split_header(&full)?.0)
}
