//! Artifact writing. Every JSON report is wrapped with the command name,
//! the effective config and its hash; CSV files start with a `# config_hash=`
//! comment; binary matrices are listed in the run log next to the hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use repkit_core::rpmx;
use repkit_core::DenseMatrix;

use crate::error::{CliError, Result};

pub struct Run {
    pub command: &'static str,
    pub config: Value,
    pub config_hash: String,
    out: Option<PathBuf>,
    artifacts: Vec<String>,
}

pub fn config_hash(command: &str, config: &Value) -> String {
    let canonical = serde_json::to_vec(&json!({ "command": command, "config": config })).expect("json");
    format!("{:x}", Sha256::digest(canonical))
}

impl Run {
    pub fn new(command: &'static str, config: &impl Serialize, out: Option<PathBuf>) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(dir) = &out {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(Self {
            command,
            config_hash: config_hash(command, &config),
            config,
            out,
            artifacts: Vec::new(),
        })
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{} needs --out DIR", self.command)))
    }

    /// The report envelope written to disk and echoed with `--json`.
    pub fn envelope(&self, result: &impl Serialize) -> Result<Value> {
        Ok(json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "result": serde_json::to_value(result).map_err(|e| CliError::Usage(e.to_string()))?,
        }))
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, envelope: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(envelope).expect("json");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("# config_hash={}\n{body}", self.config_hash);
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_text(&mut self, name: &str, body: &str) -> Result<()> {
        self.write_bytes(name, body.as_bytes())
    }

    pub fn write_matrix(&mut self, name: &str, m: &DenseMatrix) -> Result<()> {
        if let Some(dir) = &self.out {
            rpmx::save_matrix(m, &dir.join(name))?;
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    /// Copies the input manifest next to the outputs.
    pub fn copy_manifest(&mut self, manifest: &Path) -> Result<()> {
        if self.out.is_some() {
            let bytes = fs::read(manifest).map_err(|e| CliError::io(manifest, e))?;
            self.write_bytes("input_manifest.json", &bytes)?;
        }
        Ok(())
    }

    /// Appends one line per run to `run.log`.
    pub fn log(&self, status: &str) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let path = dir.join("run.log");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        writeln!(
            f,
            "{} config_hash={} status={} artifacts={}",
            self.command,
            self.config_hash,
            status,
            self.artifacts.join(",")
        )
        .map_err(|e| CliError::io(&path, e))
    }
}
