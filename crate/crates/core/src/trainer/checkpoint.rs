//! Versioned JSON checkpoints of named parameter tensors. Floats are
//! written in shortest round-trip form and keys are sorted, so
//! save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::proposal::ProposalConfig;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config_hash: String,
    params: BTreeMap<String, TensorData>,
}

/// Stable hash of the architecture-defining configuration, stored in
/// checkpoints to catch accidental config drift.
pub fn config_hash(enc_cfg: &EncoderConfig, prop_cfg: &ProposalConfig) -> String {
    let text = serde_json::to_string(&(enc_cfg, prop_cfg)).expect("configs serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn save_checkpoint(store: &ParamStore, hash: &str, path: &Path) -> Result<()> {
    let params: BTreeMap<String, TensorData> = store
        .iter()
        .map(|(name, t)| {
            (name.to_string(), TensorData { shape: t.shape().to_vec(), values: t.values().to_vec() })
        })
        .collect();
    let file =
        CheckpointFile { version: CHECKPOINT_VERSION, config_hash: hash.to_string(), params };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::Data(format!("checkpoint serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: corrupt checkpoint: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    Ok(file)
}

/// Loads a checkpoint without an architecture check. Returns the store and
/// the recorded config hash.
pub fn load_checkpoint_raw(path: &Path) -> Result<(ParamStore, String)> {
    let file = read_checkpoint(path)?;
    let mut store = ParamStore::new();
    for (name, data) in file.params {
        store.insert(&name, Tensor::new(data.shape, data.values)?);
    }
    Ok((store, file.config_hash))
}

/// Loads a checkpoint into an architecture-matched store: parameter names
/// and shapes must coincide with the target's, and the recorded config
/// hash must equal `expected_hash`. On any mismatch the target store is
/// left untouched.
pub fn load_checkpoint_into(
    store: &mut ParamStore,
    path: &Path,
    expected_hash: &str,
) -> Result<()> {
    let file = read_checkpoint(path)?;
    if file.config_hash != expected_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match the active configuration {}",
            file.config_hash, expected_hash
        )));
    }
    let missing: Vec<&str> =
        store.names().filter(|n| !file.params.contains_key(**&n)).collect();
    let extra: Vec<&String> =
        file.params.keys().filter(|n| !store.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint architecture mismatch: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, data) in &file.params {
        let t = store.get(name)?;
        if t.shape() != data.shape.as_slice() {
            return Err(Error::Config(format!(
                "parameter {name:?} has shape {:?} in checkpoint, expected {:?}",
                data.shape,
                t.shape()
            )));
        }
    }
    for (name, data) in file.params {
        store.insert(&name, Tensor::new(data.shape, data.values)?);
    }
    Ok(())
}
