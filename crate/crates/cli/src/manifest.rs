//! Run manifests: a JSON record of what a training run did, enough to
//! replay it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gridvec_core::transport::MeterSnapshot;
use gridvec_core::{TrainConfig, TrainStats};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardColumns {
    pub shard_id: usize,
    pub lo: usize,
    pub hi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// `local-sim` or `client`.
    pub mode: String,
    pub config: TrainConfig,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    pub output: Option<PathBuf>,
    /// Shard endpoints in shard order; empty for local-sim.
    pub endpoints: Vec<String>,
    pub layout: Vec<ShardColumns>,
    pub vocab_size: usize,
    pub corpus_tokens: u64,
    pub stats: TrainStats,
    /// Training traffic only; export traffic is excluded.
    pub traffic: MeterSnapshot,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(path, |f| f.write_all(&json).map_err(Into::into))
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes through a temporary sibling file and renames it into place, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let tmp = temp_path(path);
    let result = (|| {
        let mut f =
            fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        write(&mut f)?;
        f.sync_all()?;
        fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Like [`write_atomic`] for writers that take a path.
pub fn save_atomic(path: &Path, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = temp_path(path);
    let result = save(&tmp).and_then(|_| {
        fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
    });
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
