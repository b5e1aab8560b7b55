//! Binary checkpoint layout:
//!
//! ```text
//! "ADSH" | version: u8 | header_len: u64 LE | header JSON | f64 LE blobs
//! ```
//!
//! The header lists each parameter's name, group, shape and byte offset into
//! the blob section (blobs follow in header order), the backbone config, and
//! the checkpoint metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneConfig, ModelParams, ParamGroup};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADSH";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    meta: Option<CheckpointMeta>,
    params: Vec<Entry>,
}

/// SHA-256 (hex) of the backbone config's JSON form.
pub fn config_hash(config: &BackboneConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(params: &ModelParams, meta: Option<&CheckpointMeta>) -> Vec<u8> {
    let mut offset = 0;
    let entries = params
        .params()
        .iter()
        .map(|p| {
            let e = Entry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel() * 8;
            e
        })
        .collect();
    let header = Header {
        config: params.config().clone(),
        meta: meta.cloned(),
        params: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(13 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write atomically: a crash mid-write leaves any previous checkpoint intact.
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: Option<&CheckpointMeta>) -> Result<()> {
    let bytes = encode(params, meta);
    let tmp = path.with_extension("adsh.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<CheckpointMeta>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(ModelParams, Option<CheckpointMeta>)> {
    if bytes.len() < 13 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing ADSH magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", bytes[4])));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = 13usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[13..body]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let blobs = &bytes[body..];
    let tensors = header
        .params
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            let raw = blobs
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("blob for {} out of range", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_parts(&header.config, tensors)?;
    Ok((params, header.meta))
}
