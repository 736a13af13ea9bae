//! Binary checkpoint format: `"NCAW"`, u32 LE version, u64 LE JSON length, JSON
//! metadata, then little-endian f32 tensors in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use cellseg_tensor::{Scalar, Shape, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ArchConfig;
use crate::params::{param_shapes, UpdateRuleParams};

pub const MAGIC: &[u8; 4] = b"NCAW";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: manifest needs {expected} bytes, file has {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Shape,
    /// Offset in floats from the start of the payload.
    pub offset: usize,
}

/// Caller-supplied bookkeeping stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    /// Free-form extras, e.g. the training configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    tensors: Vec<ManifestEntry>,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

/// Serializes to bytes; values are stored as f32.
pub fn encode_checkpoint<T: Scalar>(
    params: &UpdateRuleParams<T>,
    arch: &ArchConfig,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>, CheckpointError> {
    params
        .check(arch)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    params.visit(|name, t| {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().clone(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    });
    let header = Header {
        arch: arch.clone(),
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(
    bytes: &[u8],
) -> Result<(UpdateRuleParams<T>, ArchConfig, CheckpointMeta), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Corrupt(
            "header shorter than 16 bytes".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = PREAMBLE
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::Corrupt(format!("metadata length {json_len} exceeds file"))
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..json_end])
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    header
        .arch
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let payload = &bytes[json_end..];
    let floats: usize = header.tensors.iter().map(|t| t.shape.numel()).sum();
    let expected = floats * 4;
    if payload.len() < expected {
        return Err(CheckpointError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }

    let shapes = param_shapes(&header.arch);
    let names = shapes.names();
    let listed: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if listed != names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(CheckpointError::Corrupt(format!(
            "manifest {listed:?} does not match architecture {names:?}"
        )));
    }
    let mut idx = 0;
    let params = shapes
        .try_map(|_, want| {
            let entry = &header.tensors[idx];
            idx += 1;
            if &entry.shape != want {
                return Err(crate::CoreError::config(format!(
                    "{}: shape {} but architecture needs {want}",
                    entry.name, entry.shape
                )));
            }
            let n = want.numel();
            let start = entry.offset * 4;
            let chunk = payload.get(start..start + n * 4).ok_or_else(|| {
                crate::CoreError::config(format!("{}: offset out of range", entry.name))
            })?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect();
            Ok(Tensor::from_vec(want.clone(), data)?)
        })
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok((params, header.arch, header.meta))
}

pub fn save_checkpoint<T: Scalar>(
    params: &UpdateRuleParams<T>,
    arch: &ArchConfig,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params, arch, meta)?;
    // Write beside the target and rename so readers never see a partial file.
    let tmp = path.with_extension("ncaw.tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(UpdateRuleParams<T>, ArchConfig, CheckpointMeta), CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
