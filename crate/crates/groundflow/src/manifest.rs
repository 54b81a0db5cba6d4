//! Run manifests: a provenance record written next to every CLI run's
//! artifacts, listing the spec hash, tool version, timing, outcome, and
//! every file the run emitted.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{GfError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub spec_path: String,
    pub spec_sha256: String,
    pub out_dir: String,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Innermost stage name of a stage-tagged error chain.
pub fn failed_stage(err: &GfError) -> Option<String> {
    match err {
        GfError::Stage { stage, source } => Some(failed_stage(source).unwrap_or_else(|| stage.to_string())),
        _ => None,
    }
}

/// All regular files below `dir` (relative paths, sorted), excluding the
/// manifest itself.
pub fn list_artifacts(dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.retain(|f| f != "manifest.json");
    files.sort();
    Ok(files)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| GfError::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| GfError::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| GfError::Config(format!("manifest encoding failed: {e}")))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, text).map_err(|e| GfError::io(path.display().to_string(), e))
    }
}
