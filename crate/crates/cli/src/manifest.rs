//! Run manifests: resolved config, thread count, and hashes of every input
//! and output file. A manifest alone is enough to rerun a command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::error::Result;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub key: String,
    pub path: PathBuf,
    pub sha256: String,
    /// Hash of the file with run-time measurements removed, when the file
    /// carries any; reruns are compared on this instead of `sha256`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config: Resolved,
    pub threads: usize,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Deterministic summary values of the run.
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: Resolved, threads: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            tool: "snapddm".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn set_result(&mut self, key: &str, v: impl Serialize) -> Result<()> {
        if let serde_json::Value::Object(m) = &mut self.results {
            m.insert(key.into(), serde_json::to_value(v)?);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

pub fn record(key: &str, path: &Path) -> Result<FileRecord> {
    Ok(FileRecord { key: key.into(), path: path.to_path_buf(), sha256: sha256_file(path)?, content_sha256: None })
}
