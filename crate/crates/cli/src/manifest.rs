//! Every command writes a `manifest.json` into its output directory before
//! doing heavy work, then rewrites it with artifact checksums once outputs
//! exist. The manifest records enough (command, seed, resolved config,
//! inputs) to re-execute the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io_util::sha256_file;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Seconds since the Unix epoch at run start.
    pub timestamp: u64,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub output_dir: String,
    /// Human-readable log of command-line overrides applied to the config.
    pub overrides: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        seed: u64,
        config: RunConfig,
        inputs: Vec<String>,
        output_dir: &Path,
        overrides: Vec<String>,
    ) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            timestamp,
            seed,
            config,
            inputs,
            output_dir: output_dir.display().to_string(),
            overrides,
            artifacts: Vec::new(),
        }
    }

    pub fn path_in(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    /// Serialize to `<out_dir>/manifest.json`.
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("serializing manifest: {e}")))?;
        fs::write(Self::path_in(out_dir), text)
            .map_err(|e| CliError::Runtime(format!("writing manifest: {e}")))
    }

    /// Record checksums for the given artifact paths and rewrite the
    /// manifest on disk.
    pub fn finalize(&mut self, out_dir: &Path, artifacts: &[PathBuf]) -> Result<(), CliError> {
        self.artifacts = artifacts
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        self.write(out_dir)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("parsing {}: {e}", path.display())))
    }
}
