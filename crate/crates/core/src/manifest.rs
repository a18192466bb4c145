//! The resumable run manifest.
//!
//! One JSON file per run directory recording, per stage: status, input
//! and output file hashes, record counts, and timing. A stage is
//! re-executed iff its input hashes changed, its outputs drifted, or
//! its status is not done. Updates are atomic (write-temp-rename).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub status: StageStatus,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub wall_ms: u64,
    pub finished_at_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: String, config: serde_json::Value) -> Self {
        Self {
            run_id: config_hash[..12].to_string(),
            config_hash,
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let bytes = fs::read(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| ManifestError::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&tmp, body).map_err(|source| ManifestError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Whether a stage can be skipped: done, same inputs, and every
    /// recorded output still present with the same hash.
    pub fn is_current(
        &self,
        stage: &str,
        input_hashes: &BTreeMap<String, String>,
        run_dir: &Path,
    ) -> bool {
        let Some(entry) = self.stages.get(stage) else {
            return false;
        };
        if entry.status != StageStatus::Done || &entry.input_hashes != input_hashes {
            return false;
        }
        entry.output_hashes.iter().all(|(name, recorded)| {
            file_hash(&run_dir.join(name)).is_ok_and(|h| &h == recorded)
        })
    }
}

/// SHA-256 of a file's bytes, lowercase hex, read in chunks.
pub fn file_hash(path: &Path) -> Result<String, ManifestError> {
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buffer = [0u8; 64 * 1024];
    loop {
        let read = reader.read(&mut buffer).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if read == 0 {
            break;
        }
        hasher.update(&buffer[..read]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
