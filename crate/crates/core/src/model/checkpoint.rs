//! Checkpoint file: 8-byte magic, little-endian u64 header length, a JSON
//! header (version, config, exit schedule, weights), then the parameters as
//! little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Transformer};
use crate::error::{Error, Result};
use crate::lite::{ExitSchedule, WeightSchedule};

const MAGIC: &[u8; 8] = b"EECKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Trained with the weighted multi-exit loss.
    Lite,
    /// Trained on the final layer only.
    Base,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: CheckpointKind,
    config: ModelConfig,
    schedule: ExitSchedule,
    weights: WeightSchedule,
    param_count: usize,
    dtype: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: Transformer,
    pub schedule: ExitSchedule,
    pub weights: WeightSchedule,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: "earlyexit-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            config: self.model.config().clone(),
            schedule: self.schedule.clone(),
            weights: self.weights.clone(),
            param_count: self.model.param_count(),
            dtype: "f64-le".into(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.model.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in self.model.params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "train a model first (train-lite)".into(),
            },
            _ => Error::io(path, e),
        })?;
        let bad = |detail: &str| Error::Malformed {
            what: "checkpoint",
            detail: detail.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let payload = &bytes[16 + hlen..];
        if payload.len() != header.param_count * 8 {
            return Err(bad("payload size does not match param_count"));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if header.schedule.n_layers() != header.config.n_layers {
            return Err(bad("schedule depth differs from model depth"));
        }
        Ok(Self {
            kind: header.kind,
            model: Transformer::from_params(header.config, params)?,
            schedule: header.schedule,
            weights: header.weights,
        })
    }
}
