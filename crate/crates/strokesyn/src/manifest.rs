//! Run manifests: enough to replay a run and to check its outputs.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<FileDigest> {
        let mut file = std::fs::File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 1 << 16];
        let mut bytes = 0u64;
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            bytes += n as u64;
        }
        Ok(FileDigest { path: path.to_path_buf(), sha256: hex::encode(hasher.finalize()), bytes })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub run_id: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    /// Per-item problems that did not stop the run.
    pub warnings: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// `<subcommand>-<12 hex digits>` derived from the effective config and the
/// input digests, so replaying a run lands in the same directory.
pub fn run_id(subcommand: &str, config: &RunConfig, inputs: &[FileDigest]) -> String {
    let hashes: Vec<&str> = inputs.iter().map(|d| d.sha256.as_str()).collect();
    let key = serde_json::to_vec(&(subcommand, config, hashes)).expect("config serializes");
    format!("{subcommand}-{}", &sha256_hex(&key)[..12])
}
