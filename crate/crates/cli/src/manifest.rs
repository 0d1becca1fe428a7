use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const FILE: &str = "manifest.json";

/// Manifest written next to a file output: `<name>.manifest.json`.
pub fn sidecar(output: &Path) -> PathBuf {
    let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{name}.manifest.json"))
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn hashes(paths: &[PathBuf]) -> anyhow::Result<Vec<FileHash>> {
    paths
        .iter()
        .filter(|p| p.exists())
        .map(|p| Ok(FileHash { path: p.display().to_string(), sha256: sha256_file(p)? }))
        .collect()
}

/// Record of one invocation, sufficient to re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved settings.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    pub fn build<S: Serialize>(
        subcommand: &str,
        settings: &S,
        seeds: Vec<u64>,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        started: f64,
    ) -> anyhow::Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            config: serde_json::to_value(settings)?,
            seeds,
            code_version: env!("CARGO_PKG_VERSION").into(),
            inputs: hashes(inputs)?,
            outputs: hashes(outputs)?,
            started_unix: started,
            finished_unix: now(),
        })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
