//! Run manifest: inventory of every file a run produced, with sizes and
//! SHA-256 checksums, written atomically as the run's last action. Reruns
//! with the same config and seed must reproduce these checksums bit for bit.

use std::path::{Path, PathBuf};

use dirsurf_core::io::atomic_write;
use dirsurf_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, '/'-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    /// Subcommand that produced this run.
    pub command: String,
    pub started_utc: String,
    pub finished_utc: String,
    pub config: RunConfig,
    /// Headline numbers for quick scans; full data lives in the run files.
    pub final_metrics: serde_json::Value,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk(root, &path, out)?;
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .map_err(|_| Error::Io(std::io::Error::other("walk escaped the run directory")))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST_NAME {
            continue;
        }
        let bytes = std::fs::read(&path)?;
        out.push(FileEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(())
}

/// Checksum every file under `dir` (except the manifest itself), sorted by
/// relative path.
pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        atomic_write(&dir.join(MANIFEST_NAME), &bytes)
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let raw = std::fs::read(dir.join(MANIFEST_NAME))?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

/// Stamp in RFC 3339 UTC.
pub fn utc_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
