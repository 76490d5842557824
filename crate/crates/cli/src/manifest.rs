//! Run manifests: config hash, code version, timing and a file inventory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    /// Absent for the manifest's own entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub status: String,
    pub started_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// Writes the initial manifest into `dir`.
    pub fn begin(dir: &Path, kind: &str, config_json: &str, seed: Option<u64>) -> Result<Self> {
        let m = Self {
            kind: kind.to_string(),
            config_hash: sha256_hex(config_json.as_bytes()),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            status: "running".into(),
            started_unix: unix_now(),
            finished_unix: None,
            files: Vec::new(),
        };
        m.write(dir)?;
        Ok(m)
    }

    /// Records the end time and the inventory of every file under `dir`.
    pub fn finish(mut self, dir: &Path, status: &str) -> Result<Self> {
        self.status = status.to_string();
        self.finished_unix = Some(unix_now());
        let mut files = Vec::new();
        for rel in list_files(dir)? {
            let name = rel.to_string_lossy().replace('\\', "/");
            if name == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(dir.join(&rel))?;
            files.push(FileEntry {
                path: name,
                bytes: Some(bytes.len() as u64),
                sha256: Some(sha256_hex(&bytes)),
            });
        }
        files.push(FileEntry {
            path: MANIFEST_FILE.into(),
            bytes: None,
            sha256: None,
        });
        files.sort_by(|a, b| a.path.cmp(&b.path));
        self.files = files;
        self.write(dir)?;
        Ok(self)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text).context("writing manifest")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Relative paths of every regular file below `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(root.join(&rel))? {
            let entry = entry?;
            let path = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Creates `parent/stem`, or `parent/stem-2`, `-3`, ... if it already exists.
pub fn fresh_dir(parent: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    for k in 1.. {
        let name = if k == 1 { stem.to_string() } else { format!("{stem}-{k}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn fresh_dir_never_reuses() {
        let tmp = tempfile::tempdir().unwrap();
        let a = fresh_dir(tmp.path(), "run").unwrap();
        let b = fresh_dir(tmp.path(), "run").unwrap();
        assert_ne!(a, b);
        assert!(b.ends_with("run-2"));
    }

    #[test]
    fn inventory_covers_every_file() {
        let tmp = tempfile::tempdir().unwrap();
        let m = RunManifest::begin(tmp.path(), "run", "{}", Some(1)).unwrap();
        fs::write(tmp.path().join("a.csv"), "x").unwrap();
        fs::create_dir(tmp.path().join("sub")).unwrap();
        fs::write(tmp.path().join("sub/b.csv"), "y").unwrap();
        let m = m.finish(tmp.path(), "completed").unwrap();
        let listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(listed, vec!["a.csv", "manifest.json", "sub/b.csv"]);
        assert_eq!(RunManifest::load(tmp.path()).unwrap(), m);
    }
}
