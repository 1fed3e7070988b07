//! Run manifests: what was run, from which config, and what it produced.
//!
//! The manifest is written atomically when a run starts and again when it
//! ends. A `completed` manifest is only written once every declared output
//! exists.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pppc_core::checkpoint::write_atomic;
use pppc_core::config::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    pub seed: u64,
    /// SHA-256 of the canonical config text.
    pub config_hash: String,
    /// Canonical TOML of the full config, defaults included.
    pub config: String,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    pub stages: Vec<Stage>,
    /// Files relative to `output_dir`.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(command: &str, config: &ExperimentConfig, dir: &Path, stages: &[&str]) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            status: Status::Running,
            seed: config.seed,
            config_hash: config.hash()?,
            config: config.to_toml()?,
            output_dir: dir.to_path_buf(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: None,
            stages: stages
                .iter()
                .map(|s| Stage {
                    name: s.to_string(),
                    status: Status::Pending,
                    detail: None,
                })
                .collect(),
            outputs: Vec::new(),
        })
    }

    pub fn set_stage(&mut self, name: &str, status: Status, detail: Option<String>) {
        if let Some(s) = self.stages.iter_mut().find(|s| s.name == name) {
            s.status = status;
            s.detail = detail;
        }
    }

    pub fn add_output(&mut self, file: &str) {
        if !self.outputs.iter().any(|o| o == file) {
            self.outputs.push(file.to_string());
        }
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(Self::FILE)
    }

    pub fn write(&self) -> CliResult<()> {
        if self.status == Status::Completed {
            if let Some(missing) = self.outputs.iter().find(|o| !self.output_dir.join(o).is_file()) {
                return Err(CliError::failure(format!(
                    "declared output `{missing}` was not written"
                )));
            }
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&self.path(), text.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid manifest {}: {e}", path.display())))
    }

    /// The recorded config, checked against its hash.
    pub fn experiment_config(&self) -> CliResult<ExperimentConfig> {
        let cfg = ExperimentConfig::from_toml(&self.config)?;
        if cfg.hash()? != self.config_hash {
            return Err(CliError::usage("manifest config does not match its recorded hash"));
        }
        Ok(cfg)
    }
}

/// Loads a TOML config or the config recorded in a `manifest.json`, then
/// applies `key=value` overrides. No path means all defaults.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let text = match path {
        None => String::new(),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            RunManifest::read(p)?.experiment_config()?.to_toml()?
        }
        Some(p) => {
            fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?
        }
    };
    Ok(ExperimentConfig::from_toml_with_overrides(&text, overrides)?)
}

/// Creates `dir`, refusing to reuse an existing one unless `force` is set,
/// in which case its previous contents are removed.
pub fn prepare_output_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::usage(format!(
                "output directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}
