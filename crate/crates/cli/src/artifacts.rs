use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ddsd::dataset::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Ties every file of an output directory to the effective config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    /// File name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub struct OutputDir {
    dir: PathBuf,
    provenance: Provenance,
}

impl OutputDir {
    /// Creates `dir` and writes the effective config into it.
    pub fn create(dir: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let toml = config.to_toml()?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, &toml).with_context(|| format!("writing {}", path.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance: Provenance {
                command: command.into(),
                config_sha256: config.hash()?,
                artifacts: BTreeMap::new(),
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name)?;
        Ok(path)
    }

    /// Adds a file some other writer already produced.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.provenance.artifacts.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(self) -> Result<Provenance> {
        let mut json = serde_json::to_string_pretty(&self.provenance)?;
        json.push('\n');
        let path = self.dir.join(PROVENANCE_FILE);
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.provenance)
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}
