//! Checkpoint archive: named parameter arrays plus the architecture config,
//! as versioned JSON with base64 little-endian f32 payloads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::params::{PArray, ParamSet, PARAMS_VERSION};
use crate::network::NetworkConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayData {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: NetworkConfig,
    shared: BTreeMap<String, ArrayData>,
    primary_head: BTreeMap<String, ArrayData>,
    auxiliary_head: BTreeMap<String, ArrayData>,
}

fn encode_group(group: &BTreeMap<String, PArray>) -> BTreeMap<String, ArrayData> {
    let engine = base64::engine::general_purpose::STANDARD;
    group
        .iter()
        .map(|(name, arr)| {
            let mut bytes = Vec::with_capacity(arr.data.len() * 4);
            for &v in &arr.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            (
                name.clone(),
                ArrayData {
                    shape: arr.shape.clone(),
                    data: engine.encode(bytes),
                },
            )
        })
        .collect()
}

fn decode_group(group: &BTreeMap<String, ArrayData>) -> Result<BTreeMap<String, PArray>> {
    let engine = base64::engine::general_purpose::STANDARD;
    group
        .iter()
        .map(|(name, enc)| {
            let bytes = engine
                .decode(&enc.data)
                .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Checkpoint(format!(
                    "array {name}: payload not a multiple of 4 bytes"
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let expected: usize = enc.shape.iter().product();
            if data.len() != expected {
                return Err(Error::Checkpoint(format!(
                    "array {name}: shape {:?} wants {expected} values, payload has {}",
                    enc.shape,
                    data.len()
                )));
            }
            Ok((
                name.clone(),
                PArray {
                    shape: enc.shape.clone(),
                    data,
                },
            ))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, cfg: &NetworkConfig) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        shared: encode_group(&params.shared),
        primary_head: encode_group(&params.primary_head),
        auxiliary_head: encode_group(&params.auxiliary_head),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads and validates a checkpoint: format version, name-set disjointness
/// and shape agreement with the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, NetworkConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    let params = ParamSet {
        shared: decode_group(&file.shared)?,
        primary_head: decode_group(&file.primary_head)?,
        auxiliary_head: decode_group(&file.auxiliary_head)?,
        version: PARAMS_VERSION,
    };
    params.validate(&file.config)?;
    Ok((params, file.config))
}
