//! The run manifest: one small document per output directory recording what
//! produced it — the command, the full config snapshot, the seed, and the
//! artifact paths. Re-running the recorded command with the recorded config
//! reproduces every artifact byte-for-byte; the manifest's creation time is
//! the only timestamp any artifact carries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Which subcommand ran: gen, train, extract, eval, or compare.
    pub command: String,
    pub mode: String,
    pub seed: u64,
    pub config_fingerprint: String,
    /// Full config snapshot; parsing this back yields the exact config used.
    pub config_toml: String,
    /// Dataset directory consumed, if the command read one.
    pub data_dir: Option<String>,
    /// Checkpoint consumed, for commands that evaluate one.
    pub checkpoint: Option<String>,
    /// Artifact paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    /// Seconds since the epoch at write time; informational only.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, mode: &str, seed: u64, config: &crate::config::Config) -> Self {
        RunManifest {
            command: command.to_string(),
            mode: mode.to_string(),
            seed,
            config_fingerprint: config.fingerprint(),
            config_toml: config.to_toml_string(),
            data_dir: None,
            checkpoint: None,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    /// Write `manifest.toml` into `dir`, replacing any previous one so a
    /// directory never holds more than a single manifest.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string_pretty(self).map_err(|e| Error::Malformed {
            path: path.clone(),
            detail: format!("manifest serialization failed: {e}"),
        })?;
        crate::fsio::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: RunManifest = toml::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("manifest does not parse: {e}"),
        })?;
        Ok(manifest)
    }

    /// The config this run used, parsed back from the embedded snapshot.
    pub fn config(&self) -> Result<crate::config::Config> {
        crate::config::Config::parse(&self.config_toml)
    }
}
