//! Named parameter store and its on-disk container.
//!
//! Layout: 8-byte little-endian manifest length, JSON manifest (an array of
//! `{name, shape, dtype, offset}` records; offsets are byte positions into
//! the payload), then the raw little-endian payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{MeldError, Result};

/// Ordered name -> tensor map. Iteration order is the sorted name order, so
/// serialization and gradient application are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// Serialize a store into an arbitrary writer (the container bytes are the
/// same as a standalone file; checkpoints embed them after their own header).
pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in store.iter() {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
        });
        offset += (tensor.len() * 8) as u64;
    }
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, tensor) in store.iter() {
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r)
}

/// Counterpart of [`write_params`]; reads to the end of the stream.
pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut store = ParamStore::new();
    for entry in &manifest {
        if entry.dtype != "f64" {
            return Err(MeldError::Checkpoint(format!(
                "unsupported dtype {} for {}",
                entry.dtype, entry.name
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(MeldError::Checkpoint(format!(
                "payload truncated for {} ({} > {})",
                entry.name,
                end,
                payload.len()
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| MeldError::Checkpoint(e.to_string()))?;
        if store.contains(&entry.name) {
            return Err(MeldError::Checkpoint(format!(
                "duplicate tensor {}",
                entry.name
            )));
        }
        store.insert(&entry.name, tensor);
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
