use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use mrgpssm::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a training run. Written before training
/// starts and never touched afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub components: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub git_describe: String,
    pub data: FileDigest,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock start, milliseconds since the Unix epoch.
    pub started_unix_ms: u128,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// `git describe` of the working directory, falling back to the source tree
/// the binary was built from.
pub fn git_describe() -> String {
    let describe = |dir: Option<&str>| {
        let mut cmd = Command::new("git");
        if let Some(d) = dir {
            cmd.args(["-C", d]);
        }
        cmd.args(["describe", "--always", "--dirty", "--tags"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
    };
    describe(None)
        .or_else(|| describe(Some(env!("CARGO_MANIFEST_DIR"))))
        .unwrap_or_else(|| "unknown".into())
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> CliResult {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Failure::new(1, e.to_string()))?;
        fs::write(path, text + "\n")
            .map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }
}
