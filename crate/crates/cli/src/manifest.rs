//! Stage manifests: the exact config, its hash, and checksums of inputs and outputs.

use std::path::Path;

use anyhow::{Context, Result};
use epiflow_core::format::sha256_hex;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

impl FileEntry {
    pub fn of(dir: &Path, name: &str) -> Result<Self> {
        let bytes = std::fs::read(dir.join(name)).with_context(|| format!("cannot read {}", dir.join(name).display()))?;
        Ok(Self {
            path: name.into(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub config_hash: String,
    pub config: RunConfig,
    pub deterministic: bool,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, deterministic: bool) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            config: cfg.portable(),
            deterministic,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
