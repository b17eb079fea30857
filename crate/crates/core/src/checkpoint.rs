//! Model checkpoints.
//!
//! Layout: magic, a JSON header (spec, policy, resolved config, step counter,
//! training-data fingerprint, parameter names and shapes), the raw f64
//! little-endian parameter payload in header order, and a trailing sha256 of
//! everything before it. Round-trips restore parameters bitwise.
//!
//! Randomness is derived positionally from the config seed plus the step
//! counter (see [`crate::rng`]), so seed + step in the header fully capture
//! the RNG state needed to resume.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{EncoderSpec, Model, Param, ParamPolicy};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"STCK0001";

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: EncoderSpec,
    policy: ParamPolicy,
    config: TrainConfig,
    step: u64,
    train_fingerprint: Option<String>,
    params: Vec<ParamMeta>,
    /// Adam moment entries following the parameter payload (first moments,
    /// then second moments, in this order). Needed for exact resume.
    #[serde(default)]
    optimizer: Vec<ParamMeta>,
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub entries: Vec<(String, Array2<f64>, Array2<f64>)>,
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub train_fingerprint: Option<String>,
    pub optimizer: Option<OptimizerState>,
}

pub fn save(
    model: &Model,
    config: &TrainConfig,
    train_fingerprint: Option<&str>,
    optimizer: Option<&OptimizerState>,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = CheckpointHeader {
        spec: model.spec,
        policy: model.policy,
        config: config.clone(),
        step: model.step,
        train_fingerprint: train_fingerprint.map(str::to_string),
        params: model
            .params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                trainable: p.trainable,
            })
            .collect(),
        optimizer: optimizer
            .map(|o| {
                o.entries
                    .iter()
                    .map(|(name, m, _)| ParamMeta {
                        name: name.clone(),
                        rows: m.nrows(),
                        cols: m.ncols(),
                        trainable: true,
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in &model.params {
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(o) = optimizer {
        for (_, m, _) in &o.entries {
            for v in m.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (_, _, v2) in &o.entries {
            for v in v2.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&bytes);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.write_all(&digest)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expected = Sha256::digest(body);
    if digest != expected.as_slice() {
        return Err(Error::CorruptCheckpoint("integrity hash mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() < 16 + header_len {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::CorruptCheckpoint(format!("header parse: {e}")))?;

    let mut offset = 16 + header_len;
    let mut read_array = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let n = rows * cols;
        let end = offset + n * 8;
        if body.len() < end {
            return Err(Error::CorruptCheckpoint("truncated payload".into()));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in body[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset = end;
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::CorruptCheckpoint(format!("shape: {e}")))
    };

    let mut params = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let value = read_array(meta.rows, meta.cols)?;
        params.push(Param {
            name: meta.name.clone(),
            value,
            trainable: meta.trainable,
        });
    }
    let optimizer = if header.optimizer.is_empty() {
        None
    } else {
        let mut firsts = Vec::with_capacity(header.optimizer.len());
        for meta in &header.optimizer {
            firsts.push(read_array(meta.rows, meta.cols)?);
        }
        let mut entries = Vec::with_capacity(header.optimizer.len());
        for (meta, m) in header.optimizer.iter().zip(firsts) {
            let v = read_array(meta.rows, meta.cols)?;
            entries.push((meta.name.clone(), m, v));
        }
        Some(OptimizerState { entries })
    };
    if offset != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes in payload".into()));
    }
    Ok(LoadedCheckpoint {
        model: Model {
            spec: header.spec,
            policy: header.policy,
            params,
            step: header.step,
        },
        config: header.config,
        train_fingerprint: header.train_fingerprint,
        optimizer,
    })
}

/// Loads and additionally requires the stored spec to match.
pub fn load_expecting(path: &Path, spec: &EncoderSpec) -> Result<LoadedCheckpoint> {
    let loaded = load(path)?;
    if loaded.model.spec != *spec {
        return Err(Error::CorruptCheckpoint(format!(
            "encoder spec mismatch: checkpoint {:?} vs expected {:?}",
            loaded.model.spec, spec
        )));
    }
    Ok(loaded)
}

/// Checkpoint file hash, used as the model fingerprint in reports.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    Ok(crate::fingerprint::of_file(path)?)
}
