//! `TLABCKPT` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TLABCKPT"          8-byte magic
//! u32 version          currently 1
//! u64 header_len
//! header_len bytes     UTF-8 JSON header
//! payload              concatenated f32 parameter values
//! ```
//!
//! The header names the architecture, class count, training metadata and
//! each parameter's shape and byte range within the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{build_dtn, Model, DTN_ARCH};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TLABCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch_id: String,
    num_classes: usize,
    metadata: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if model.arch_id() != DTN_ARCH {
        return Err(CheckpointError::UnknownArch(model.arch_id().to_string()).into());
    }
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let len = p.value.numel() * 4;
            let entry = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len,
            };
            offset += len;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        arch_id: model.arch_id().to_string(),
        num_classes: model.num_classes(),
        metadata: meta.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8], CheckpointError> {
    bytes.get(at..at.saturating_add(len)).ok_or(CheckpointError::Truncated {
        needed: at.saturating_add(len),
        available: bytes.len(),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(take(bytes, 8, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(take(bytes, 12, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(bytes, 20, header_len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.arch_id != DTN_ARCH {
        return Err(CheckpointError::UnknownArch(header.arch_id).into());
    }
    let payload_start = 20 + header_len;
    let payload_len: usize = header.params.iter().map(|p| p.len).sum();
    take(bytes, payload_start, payload_len)?;
    if bytes.len() != payload_start + payload_len {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len() - payload_start - payload_len
        ))
        .into());
    }

    let mut model = build_dtn(header.num_classes, 0).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.params.len() != model.params().len() {
        return Err(CheckpointError::Header(format!(
            "expected {} parameters, header lists {}",
            model.params().len(),
            header.params.len()
        ))
        .into());
    }
    let mut values = Vec::with_capacity(header.params.len());
    for (entry, expected) in header.params.iter().zip(model.params()) {
        if entry.name != expected.name || entry.shape != expected.value.shape() {
            return Err(CheckpointError::Header(format!(
                "parameter {} {:?} does not match architecture ({} {:?})",
                entry.name,
                entry.shape,
                expected.name,
                expected.value.shape()
            ))
            .into());
        }
        if entry.len != expected.value.numel() * 4 {
            return Err(CheckpointError::Header(format!("bad byte length for {}", entry.name)).into());
        }
        let raw = take(bytes, payload_start + entry.offset, entry.len)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        values.push(Tensor::new(entry.shape.clone(), data)?);
    }
    model.set_params(values)?;
    Ok((model, header.metadata))
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(Error::from)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}
