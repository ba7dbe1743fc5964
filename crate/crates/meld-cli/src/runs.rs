//! Run-directory discipline: a config snapshot guards against mixing
//! configurations, outputs are append only unless forced, and every stage
//! leaves a manifest recording its input and output hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, Resolved};
use crate::errors::{CliError, CliResult};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub force: bool,
}

impl RunDir {
    /// Open (creating if needed) a run directory. The first stage writes
    /// the resolved config snapshot; later stages must match it exactly
    /// unless `--force` rewrites it.
    pub fn open(root: &Path, resolved: &Resolved, force: bool) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        let snap_path = root.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let existing = fs::read_to_string(&snap_path)?;
            if existing != resolved.snapshot {
                if !force {
                    return Err(CliError::validation(format!(
                        "run dir {} was created with a different configuration; \
                         rerun with --force to replace its snapshot",
                        root.display()
                    )));
                }
                fs::write(&snap_path, &resolved.snapshot)?;
            }
        } else {
            fs::write(&snap_path, &resolved.snapshot)?;
        }
        Ok(Self { root: root.to_path_buf(), force })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Append-only guard: refuse to overwrite an existing artifact unless
    /// the run was forced. Creates parent directories as a side effect.
    pub fn fresh_path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            return Err(CliError::validation(format!(
                "{} already exists; outputs are append only (use --force to overwrite)",
                p.display()
            )));
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    /// Same guard for a directory artifact. A forced rerun clears it so
    /// stale files from the previous attempt cannot leak into hashes.
    pub fn fresh_dir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            if !self.force {
                return Err(CliError::validation(format!(
                    "{} already exists; outputs are append only (use --force to overwrite)",
                    p.display()
                )));
            }
            fs::remove_dir_all(&p)?;
        }
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn write_manifest(&self, manifest: &StageManifest) -> CliResult<()> {
        let dir = self.root.join("manifest");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.json", manifest.command));
        let body = serde_json::to_string_pretty(manifest)?;
        fs::write(path, body)?;
        Ok(())
    }
}

/// Provenance record one stage leaves behind. Inputs map relative paths to
/// content hashes; outputs list what the stage produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl StageManifest {
    pub fn new(command: &str, resolved: &Resolved) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: resolved.hash.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, run: &RunDir, rel: &str) -> CliResult<()> {
        let hash = hash_path(&run.path(rel))?;
        self.inputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::runtime(format!("cannot hash {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Hash a file, or a directory as the hash of its sorted (name, file hash)
/// listing. Stable across platforms because the walk is sorted.
pub fn hash_path(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        let mut entries: Vec<(String, PathBuf)> = fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect();
        entries.sort();
        let mut acc = String::new();
        for (name, p) in entries {
            acc.push_str(&name);
            acc.push(' ');
            acc.push_str(&hash_path(&p)?);
            acc.push('\n');
        }
        Ok(sha256_hex(acc.as_bytes()))
    } else {
        hash_file(path)
    }
}

/// Newest checkpoint in a directory by step number embedded in the name
/// (`step-NNNNNN.ckpt`).
pub fn latest_checkpoint(dir: &Path) -> CliResult<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = fs::read_dir(dir).map_err(|e| {
        CliError::validation(format!("checkpoint dir {}: {e}", dir.display()))
    })?;
    for entry in entries {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(step) = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        CliError::validation(format!("no step-*.ckpt files in {}", dir.display()))
    })
}
