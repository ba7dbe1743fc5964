//! Model checkpoints: an 8-byte little-endian header length, a JSON header
//! (format version, model config plus its hash, codebook hash, step), then
//! the named-tensor container holding parameters, postnet running
//! statistics, and optionally the Adam state.
//!
//! Everything is written in deterministic order, so identical models produce
//! byte-identical checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{read_params, write_params, AdamState, ParamStore};
use crate::error::{MeldError, Result};
use crate::vq::Codebook;

use super::{BnStats, MeldModel, ModelConfig};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub codebook_hash: String,
    pub step: u64,
    pub has_optimizer: bool,
}

/// SHA-256 over the canonical JSON serialization of the config.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    crate::vq::hex_string(&h.finalize())
}

pub struct LoadedCheckpoint {
    pub model: MeldModel,
    pub header: CheckpointHeader,
    pub optimizer: Option<AdamState>,
}

impl LoadedCheckpoint {
    /// Reject a checkpoint whose config or codebook does not match what the
    /// caller is about to use it with.
    pub fn ensure_matches(&self, cfg: &ModelConfig, cb: &Codebook) -> Result<()> {
        if self.header.config_hash != config_hash(cfg) {
            return Err(MeldError::Checkpoint(
                "checkpoint config hash does not match the requested config".into(),
            ));
        }
        if self.header.codebook_hash != cb.content_hash() {
            return Err(MeldError::Checkpoint(
                "checkpoint codebook hash does not match the provided codebook".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &MeldModel,
    codebook_hash: &str,
    step: u64,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        config_hash: config_hash(&model.config),
        codebook_hash: codebook_hash.to_string(),
        step,
        has_optimizer: optimizer.is_some(),
    };
    let mut store = ParamStore::new();
    for (name, tensor) in model.params.iter() {
        store.insert(&format!("model.{name}"), tensor.clone());
    }
    for (l, stats) in model.bn_running.iter().enumerate() {
        store.insert(
            &format!("buffer.postnet.bn{l}.running_mean"),
            ArrayD::from_shape_vec(IxDyn(&[stats.mean.len()]), stats.mean.clone()).unwrap(),
        );
        store.insert(
            &format!("buffer.postnet.bn{l}.running_var"),
            ArrayD::from_shape_vec(IxDyn(&[stats.var.len()]), stats.var.clone()).unwrap(),
        );
    }
    if let Some(adam) = optimizer {
        for (name, m) in &adam.m {
            store.insert(&format!("adam.m.{name}"), m.clone());
        }
        for (name, v) in &adam.v {
            store.insert(&format!("adam.v.{name}"), v.clone());
        }
        store.insert("adam.t", ArrayD::from_elem(IxDyn(&[]), adam.t as f64));
    }
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    write_params(&mut w, &store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(MeldError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    if header.config_hash != config_hash(&header.config) {
        return Err(MeldError::Checkpoint(
            "checkpoint header hash does not match its embedded config".into(),
        ));
    }
    let store = read_params(&mut r)?;
    let mut params = ParamStore::new();
    let mut adam = AdamState::default();
    let mut adam_seen = false;
    let mut bn: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = vec![(None, None); 3];
    for (name, tensor) in store.iter() {
        if let Some(rest) = name.strip_prefix("model.") {
            params.insert(rest, tensor.clone());
        } else if let Some(rest) = name.strip_prefix("buffer.postnet.bn") {
            let (idx, kind) = rest
                .split_once('.')
                .ok_or_else(|| MeldError::Checkpoint(format!("malformed buffer name {name}")))?;
            let l: usize = idx
                .parse()
                .map_err(|_| MeldError::Checkpoint(format!("malformed buffer name {name}")))?;
            if l >= bn.len() {
                return Err(MeldError::Checkpoint(format!("buffer index {l} out of range")));
            }
            let values = tensor.iter().copied().collect::<Vec<f64>>();
            match kind {
                "running_mean" => bn[l].0 = Some(values),
                "running_var" => bn[l].1 = Some(values),
                _ => {
                    return Err(MeldError::Checkpoint(format!("unknown buffer {name}")));
                }
            }
        } else if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_seen = true;
            adam.m.insert(rest.to_string(), tensor.clone());
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_seen = true;
            adam.v.insert(rest.to_string(), tensor.clone());
        } else if name == "adam.t" {
            adam_seen = true;
            adam.t = tensor
                .iter()
                .next()
                .copied()
                .ok_or_else(|| MeldError::Checkpoint("empty adam.t".into()))?
                as u64;
        } else {
            return Err(MeldError::Checkpoint(format!("unknown tensor {name}")));
        }
    }
    let bn_running = bn
        .into_iter()
        .enumerate()
        .map(|(l, (mean, var))| {
            Ok(BnStats {
                mean: mean
                    .ok_or_else(|| MeldError::Checkpoint(format!("missing bn{l} mean")))?,
                var: var.ok_or_else(|| MeldError::Checkpoint(format!("missing bn{l} var")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if header.has_optimizer != adam_seen {
        return Err(MeldError::Checkpoint(
            "optimizer presence does not match the header".into(),
        ));
    }
    let model = MeldModel::from_parts(header.config.clone(), params, bn_running)?;
    Ok(LoadedCheckpoint {
        model,
        header,
        optimizer: adam_seen.then_some(adam),
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
