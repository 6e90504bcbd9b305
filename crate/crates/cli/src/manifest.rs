use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use nadlab::tensor::atomic_write;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

/// Record of one command invocation, written next to its primary output
/// before work starts and rewritten when it ends.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    pub code_version: &'static str,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: Status,
    pub message: Option<String>,
    #[serde(skip)]
    path: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputHash {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn begin(command: &str, config: Value, inputs: &[&Path], primary: &Path, seed: u64) -> Result<Self> {
        let m = Self {
            command: command.into(),
            config,
            inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
            outputs: vec![],
            code_version: nadlab::experiments::CODE_VERSION,
            seed,
            started_unix: now(),
            finished_unix: None,
            status: Status::Running,
            message: None,
            path: manifest_path(primary),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        atomic_write(&self.path, serde_json::to_string_pretty(self)?.as_bytes())
            .with_context(|| format!("writing manifest {}", self.path.display()))
    }

    pub fn finish(mut self, outputs: Vec<PathBuf>, status: Status, message: Option<String>) -> Result<()> {
        self.outputs = outputs;
        self.status = status;
        self.message = message;
        self.finished_unix = Some(now());
        self.write()
    }
}
