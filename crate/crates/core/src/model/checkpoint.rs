// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file format.
//!
//! ```text
//! BIASLOC-CHECKPOINT 1\n
//! <TOML header: [config] table and one [[tensor]] entry per parameter>
//! %%PAYLOAD%%\n
//! <little-endian f32 data for every tensor, in header order>
//! <CRC32 of the payload, little-endian u32>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

use super::{ModelConfig, ParamLayout, Transformer};

const MAGIC: &str = "BIASLOC-CHECKPOINT";
const VERSION: u32 = 1;
const PAYLOAD_MARKER: &[u8] = b"%%PAYLOAD%%\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("checkpoint payload has {found} bytes, header declares {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("file holds a model configuration but no weights")]
    MissingPayload,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    tensor: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub(super) fn save_checkpoint(model: &Transformer<f32>, path: &Path) -> Result<()> {
    let layout = model.layout();
    let header = Header {
        config: *model.config(),
        tensor: layout
            .names
            .iter()
            .zip(&layout.shapes)
            .map(|(name, shape)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let mut bytes = format!("{MAGIC} {VERSION}\n").into_bytes();
    bytes.extend(toml::to_string(&header).expect("header serializes").into_bytes());
    bytes.extend_from_slice(PAYLOAD_MARKER);
    let payload_start = bytes.len();
    for p in model.params() {
        for x in p.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes[payload_start..]);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Transformer<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

fn decode(bytes: &[u8]) -> Result<Transformer<f32>, CheckpointError> {
    let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| malformed("header is not UTF-8"))?;
    let Some(version) = first.strip_prefix(MAGIC) else {
        // A bare configuration dump parses as a config but carries no weights.
        if let Ok(text) = std::str::from_utf8(bytes) {
            if toml::from_str::<ModelConfig>(text).is_ok() {
                return Err(CheckpointError::MissingPayload);
            }
        }
        return Err(malformed("missing checkpoint magic"));
    };
    let version = version.trim();
    if version != VERSION.to_string() {
        return Err(CheckpointError::VersionMismatch {
            found: version.to_string(),
            expected: VERSION,
        });
    }

    let rest = &bytes[(nl + 1).min(bytes.len())..];
    let marker = rest.windows(PAYLOAD_MARKER.len()).position(|w| w == PAYLOAD_MARKER);
    let header_end = marker.unwrap_or(rest.len());
    let text = std::str::from_utf8(&rest[..header_end]).map_err(|_| malformed("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let Some(marker) = marker else {
        return Err(CheckpointError::MissingPayload);
    };
    if header.tensor.is_empty() {
        return Err(CheckpointError::MissingPayload);
    }

    let payload_start = nl + 1 + marker + PAYLOAD_MARKER.len();
    let expected: usize = header.tensor.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    let found = bytes.len().saturating_sub(payload_start + 4);
    if bytes.len() < payload_start + 4 || found != expected {
        return Err(CheckpointError::SizeMismatch { expected, found });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[payload_start..body_end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let config = header.config;
    config.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let layout = ParamLayout::new(&config);
    if layout.len() != header.tensor.len() {
        return Err(CheckpointError::Malformed(format!(
            "configuration needs {} tensors, header lists {}",
            layout.len(),
            header.tensor.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.len());
    let mut offset = payload_start;
    for (i, entry) in header.tensor.iter().enumerate() {
        if entry.name != layout.names[i] || entry.shape != layout.shapes[i] {
            return Err(CheckpointError::Malformed(format!(
                "tensor {i}: expected {} {:?}, found {} {:?}",
                layout.names[i], layout.shapes[i], entry.name, entry.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        params.push(Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
    }
    Transformer::from_params(config, params).map_err(|e| CheckpointError::Malformed(e.to_string()))
}
