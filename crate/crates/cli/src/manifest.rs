//! Per-run manifest written next to every command's outputs.

use std::path::{Path, PathBuf};

use crop_core::chat::sha256_hex;
use serde::Serialize;
use serde_json::Value;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct OutputDigest {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputDigest>,
    pub tool_version: &'static str,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).expect("UTC timestamps format")
}

/// Collects outputs while a command runs.
pub struct Recorder {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path, config: Value, seed: u64) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION"),
                started_at: now(),
                finished_at: String::new(),
            },
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    /// Write `bytes` to `rel` under the output directory and record its digest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.push(OutputDigest {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut body = serde_json::to_vec_pretty(value).expect("outputs serialize");
        body.push(b'\n');
        self.write(rel, &body)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.manifest.finished_at = now();
        let path = self.out_dir.join("manifest.json");
        let mut body = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        body.push(b'\n');
        std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))
    }
}
