use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nvk_core::checkpoint::sha256_hex;
use nvk_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Provenance record written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Artifact file name → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            artifacts: BTreeMap::new(),
        }
    }

    /// Records `path` under its path relative to `root`.
    pub fn add(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.strip_prefix(root).unwrap_or(path);
        self.artifacts
            .insert(name.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn add_all(&mut self, root: &Path, paths: impl IntoIterator<Item = PathBuf>) -> Result<()> {
        for p in paths {
            self.add(root, &p)?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
