//! Versioned binary checkpoints.
//!
//! Layout: the magic string `QRVAE1`, a little-endian u32 manifest length,
//! a JSON manifest (model config, config hash, named tensor entries), then
//! the raw little-endian `f64` data of every state tensor in manifest
//! order. Loading rebuilds the architecture from the embedded model config
//! and refuses magic, version, or shape mismatches, so a round trip
//! reproduces forward outputs bitwise.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::models::VaeModel;

pub const MAGIC: &[u8; 6] = b"QRVAE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything needed to rebuild and validate a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// SHA-256 of the experiment config that produced the checkpoint.
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Serialize a model and its provenance hash to `path`.
pub fn save_checkpoint(model: &VaeModel, config_hash: &str, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let state = model.state_tensors();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        config_hash: config_hash.to_string(),
        tensors: state
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(&display, e))?;
    file.write_all(&(manifest_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(&display, e))?;
    file.write_all(&manifest_json).map_err(|e| Error::io(&display, e))?;
    let mut buf = Vec::new();
    for (_, tensor) in &state {
        buf.clear();
        buf.reserve(tensor.numel() * 8);
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

/// Load a checkpoint, rebuilding the model from its embedded config.
pub fn load_checkpoint(path: &Path) -> Result<(VaeModel, CheckpointManifest)> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{display}: bad magic, expected {:?} (format version {FORMAT_VERSION})",
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let len_start = MAGIC.len();
    let manifest_len = u32::from_le_bytes(
        bytes[len_start..len_start + 4].try_into().expect("4 bytes"),
    ) as usize;
    let manifest_start = len_start + 4;
    let manifest_end = manifest_start + manifest_len;
    if bytes.len() < manifest_end {
        return Err(Error::Checkpoint(format!("{display}: truncated manifest")));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[manifest_start..manifest_end])
            .map_err(|e| Error::Checkpoint(format!("{display}: manifest decode: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{display}: format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut model = VaeModel::build(&manifest.model, 0)?;
    let mut offset = manifest_end;
    {
        let state = model.state_tensors_mut();
        if state.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{display}: manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                state.len()
            )));
        }
        for ((name, tensor), entry) in state.into_iter().zip(&manifest.tensors) {
            if name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{display}: manifest-shape mismatch at {name:?} {:?} vs {:?} {:?}",
                    tensor.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let n = tensor.numel();
            let end = offset + n * 8;
            if bytes.len() < end {
                return Err(Error::Checkpoint(format!(
                    "{display}: truncated tensor data at {name}"
                )));
            }
            for (slot, chunk) in tensor.data_mut().iter_mut().zip(bytes[offset..end].chunks(8))
            {
                *slot = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset = end;
        }
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{display}: {} trailing bytes after tensor data",
            bytes.len() - offset
        )));
    }
    Ok((model, manifest))
}
