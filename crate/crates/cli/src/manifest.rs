//! Run manifests: one JSON per stage directory with config snapshot,
//! parent references, seeds, and artifact checksums. Writers hold an
//! advisory lock file so concurrent matrix cells never interleave.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    pub config_hash: String,
    pub config_snapshot: String,
    pub parents: Vec<String>,
    pub seed: u64,
    pub git_describe: String,
    pub created_unix: u64,
    pub status: String,
    pub artifacts: Vec<ArtifactEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const STATUS_COMPLETE: &str = "complete";

impl RunManifest {
    pub fn new(stage: &str, config_hash: &str, cfg_text: &str, parents: Vec<String>, seed: u64) -> Self {
        Self {
            run_id: format!("{stage}-{config_hash}"),
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            config_snapshot: cfg_text.to_string(),
            parents,
            seed,
            git_describe: git_describe(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            status: "running".to_string(),
            artifacts: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Record an artifact (path relative to the run dir) with its checksum.
    pub fn add_artifact(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let sha = matlat_core::arrayio::file_sha256(&dir.join(rel))
            .with_context(|| format!("checksumming {rel}"))?;
        self.artifacts.push(ArtifactEntry {
            path: rel.to_string(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path_in(dir), json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(Self::path_in(dir))
            .with_context(|| format!("reading manifest in {}", dir.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// A completed run whose artifacts all match their checksums.
    pub fn verify_complete(dir: &Path) -> bool {
        let Ok(m) = Self::read(dir) else {
            return false;
        };
        if m.status != STATUS_COMPLETE {
            return false;
        }
        m.artifacts.iter().all(|a| {
            matlat_core::arrayio::file_sha256(&dir.join(&a.path))
                .map(|sha| sha == a.sha256)
                .unwrap_or(false)
        })
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Advisory lock on a run directory (exclusive-create lock file).
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(600);
        loop {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if std::time::Instant::now() > deadline {
                        bail!("timed out waiting for lock on {}", dir.display());
                    }
                    std::thread::sleep(std::time::Duration::from_millis(100));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
