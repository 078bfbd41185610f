use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use jebm::fsutil::write_atomic;

/// Record of one `train` invocation, kept in `run.json` next to its
/// outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub status: RunStatus,
    /// The resolved config, as written to `config.toml`.
    pub config: String,
    /// SHA-256 of `blob <len>\0<config>`, the git object-id scheme.
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub resumed_from: Option<PathBuf>,
    pub outputs: RunOutputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(config: String, seed: u64, resumed_from: Option<PathBuf>, outputs: RunOutputs) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            status: RunStatus::Running,
            config_hash: content_hash(config.as_bytes()),
            config,
            seed,
            started_at: now(),
            finished_at: None,
            resumed_from,
            outputs,
        }
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
        self.finished_at = Some(now());
    }

    pub fn write(&self, path: &Path) -> jebm::Result<()> {
        let mut s = serde_json::to_vec_pretty(self)?;
        s.push(b'\n');
        write_atomic(path, &s)
    }
}
