//! Run manifests: a key-value record of how each set of outputs was produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub args: BTreeMap<String, String>,
    pub config: RunConfig,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `<artifact>.manifest.toml` for a file output, `<dir>/manifest.toml` for a directory.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("manifest.toml")
    } else {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.toml");
        PathBuf::from(name)
    }
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix: now(),
            finished_unix: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            args: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }

    /// Write the manifest, run `produce`, then rewrite it with the finish time.
    pub fn around(mut self, path: &Path, produce: impl FnOnce() -> Result<()>) -> Result<()> {
        self.write(path)?;
        produce()?;
        self.finished_unix = Some(now());
        self.write(path)
    }
}
