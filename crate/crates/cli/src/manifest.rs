use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Provenance record written next to every output as `<output>.manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; `fasb replay` re-runs them.
    pub args: Vec<String>,
    pub tool_version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(OsString::from)
        .unwrap_or_else(|| OsString::from("output"));
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub struct Recorder {
    command: &'static str,
    args: Vec<String>,
    started: u128,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &'static str, args: Vec<String>) -> Self {
        Self {
            command,
            args,
            started: now_ms(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Write the manifest for `primary`, listing `outputs`.
    pub fn finish(self, primary: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs,
            started_at_unix_ms: self.started,
            finished_at_unix_ms: now_ms(),
        };
        let path = manifest_path(primary);
        let mut body = serde_json::to_vec_pretty(&manifest)?;
        body.push(b'\n');
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}
