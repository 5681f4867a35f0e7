//! `manifest.json`: every result file with its sha256, plus the config hash
//! and the seeds that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Named sub-seeds, e.g. `train/r0`.
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, master_seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            master_seed,
            seeds: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    /// Hashes every regular file under `root` except the manifest itself,
    /// in sorted path order, and writes `root/manifest.json`.
    pub fn write(mut self, root: &Path) -> CliResult<Self> {
        let mut paths = Vec::new();
        collect(root, root, &mut paths)?;
        paths.sort();
        self.files = paths
            .into_iter()
            .filter(|rel| rel != MANIFEST_NAME)
            .map(|rel| {
                let full = root.join(&rel);
                let bytes = std::fs::read(&full).map_err(|e| CliError::io(&full, e))?;
                Ok(FileEntry {
                    sha256: hex(&Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                    path: rel,
                })
            })
            .collect::<CliResult<_>>()?;
        let path = root.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Files whose current content no longer matches the recorded hash.
    pub fn verify(&self, root: &Path) -> CliResult<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            let full = root.join(&f.path);
            let bytes = std::fs::read(&full).map_err(|e| CliError::io(&full, e))?;
            if hex(&Sha256::digest(&bytes)) != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path: PathBuf = entry.path();
        let kind = entry.file_type().map_err(|e| CliError::io(&path, e))?;
        if kind.is_dir() {
            collect(root, &path, out)?;
        } else if kind.is_file() {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(
                rel.components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
            );
        }
    }
    Ok(())
}
