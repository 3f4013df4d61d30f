use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use epimatch::io::write_atomic;
use epimatch::Error;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, sha256_hex, CommandConfig};
use crate::CliResult;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// What was run, with which resolved configuration, and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Command-line arguments without the program name and `--out`.
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub inputs: Vec<PathBuf>,
    /// Output files relative to the output directory.
    pub outputs: BTreeMap<String, OutputEntry>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// `None` on success.
    pub error: Option<String>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            argv,
            seed: 0,
            config: serde_json::Value::Null,
            config_sha256: String::new(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            error: None,
        }
    }

    pub fn record_config<T: CommandConfig>(&mut self, cfg: &T) {
        self.seed = cfg.seed();
        self.config = serde_json::to_value(cfg).expect("configs serialize");
        self.config_sha256 = config_hash(cfg);
    }

    pub fn add_input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    pub fn finish(&mut self, out: &OutDir, error: Option<String>) {
        self.outputs = out.files.clone();
        self.finished_unix_ms = now_ms();
        self.error = error;
    }
}

/// Output directory that records the digest of every file written through it.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    files: BTreeMap<String, OutputEntry>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` atomically to `rel` (slash-separated, below the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        write_atomic(&path, bytes)?;
        self.files.insert(
            rel.to_string(),
            OutputEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.root.join(MANIFEST_NAME), text.as_bytes())?;
        Ok(())
    }
}
