//! Per-command manifests recording inputs, outputs and their hashes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub grid_fingerprint: String,
    pub dict_fingerprint: String,
    pub isotopes: Vec<String>,
    pub image_shape: Option<(usize, usize)>,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest) → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific scalars.
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            ..Default::default()
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    /// Records `name` inside `dir`, which must already be written.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> CliResult<()> {
        self.outputs.insert(name.into(), hash_file(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join(FILE_NAME), self)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    /// Fails unless `name` next to this manifest still hashes to the recorded value.
    pub fn verify_output(&self, dir: &Path, name: &str) -> CliResult<()> {
        let recorded = self
            .outputs
            .get(name)
            .ok_or_else(|| CliError::format(dir.join(FILE_NAME).display().to_string(), format!("no output {name}")))?;
        let found = hash_file(&dir.join(name))?;
        if &found != recorded {
            return Err(tofrecon::Error::Fingerprint {
                what: dir.join(name).display().to_string(),
                expected: recorded.clone(),
                found,
            }
            .into());
        }
        Ok(())
    }
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(tofrecon::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path.display().to_string(), e.to_string()))
}
