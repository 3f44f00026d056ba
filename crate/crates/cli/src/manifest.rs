use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written once per output directory.
///
/// Two runs whose manifests agree in everything but the timestamps produce
/// byte-identical numeric outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 of each input file, keyed by role.
    pub inputs: Vec<InputDigest>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn digest_file(role: &str, path: &Path) -> Result<InputDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(InputDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64, started_unix: f64) -> Result<Self, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::validation(e.to_string()))?;
        Ok(RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            version: slpca_version().to_string(),
            started_unix,
            finished_unix: started_unix,
        })
    }

    pub fn with_input(mut self, role: &str, path: &Path) -> Result<Self, CliError> {
        self.inputs.push(digest_file(role, path)?);
        Ok(self)
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<Self, CliError> {
        self.finished_unix = now_unix();
        io::write_json(&dir.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }
}

pub fn slpca_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
