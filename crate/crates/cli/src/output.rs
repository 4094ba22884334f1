//! Output directories: atomic file writes, artifact hashes, status record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use refpose::data::tensorfile::sha256_hex;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub const STATUS_FILE: &str = "status.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

pub struct OutputDir {
    path: PathBuf,
    /// Deterministic artifacts and their SHA-256.
    artifacts: BTreeMap<String, String>,
    /// Files whose contents vary between runs (wall-clock timings).
    volatile: Vec<String>,
}

fn out_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

impl OutputDir {
    /// Creates the directory; an existing non-empty one is only reused with `force`.
    pub fn prepare(path: &Path, force: bool) -> Result<Self, CliError> {
        if path.exists() {
            let non_empty = fs::read_dir(path).map_err(|e| out_err(path, e))?.next().is_some();
            if non_empty && !force {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path).map_err(|e| out_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            artifacts: BTreeMap::new(),
            volatile: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write_raw(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.join(name);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| out_err(parent, e))?;
        }
        let tmp = target.with_extension("partial");
        fs::write(&tmp, bytes).map_err(|e| out_err(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| out_err(&target, e))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_raw(name, bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_volatile(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_raw(name, bytes)?;
        if !self.volatile.iter().any(|v| v == name) {
            self.volatile.push(name.to_string());
        }
        Ok(())
    }

    /// Records a file written elsewhere (e.g. by the checkpoint writer).
    pub fn register(&mut self, name: &str) -> Result<(), CliError> {
        let p = self.join(name);
        let bytes = fs::read(&p).map_err(|e| out_err(&p, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_config(&mut self, cfg: &RunConfig) -> Result<(), CliError> {
        self.write(RESOLVED_CONFIG_FILE, cfg.to_toml().as_bytes())
    }

    /// Writes `status.json` for a finished or failed command.
    pub fn finish(self, command: &str, outcome: &Result<(), CliError>) -> Result<(), CliError> {
        let (status, code, error) = match outcome {
            Ok(()) => ("ok", 0, None),
            Err(e) => ("error", e.exit_code(), Some(e.to_string())),
        };
        let record = json!({
            "command": command,
            "status": status,
            "exit_code": code,
            "error": error,
            "artifacts": self.artifacts,
            "volatile": self.volatile,
        });
        let mut text = serde_json::to_string_pretty(&record).expect("status serializes");
        text.push('\n');
        self.write_raw(STATUS_FILE, text.as_bytes())
    }
}
