//! Run manifests: what a command read, what it wrote, and hashes of both.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub rng_algorithm: String,
    pub seed: u64,
    pub config: Option<FileHash>,
    pub inputs: Vec<FileHash>,
    /// Output paths are relative to the manifest's directory.
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Free-form provenance notes (for example that step budgets are
    /// chosen for desk-scale runs).
    pub notes: Vec<String>,
}

pub fn sha256_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let b = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&b))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: sgt_core::rng::ALGORITHM_TAG.to_string(),
            seed,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            notes: Vec::new(),
        }
    }

    pub fn with_config(mut self, path: Option<&Path>) -> Result<Self, CliError> {
        self.config = path.map(FileHash::of).transpose()?;
        Ok(self)
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileHash::of(path)?);
        Ok(())
    }

    /// Hashes each output (given relative to `dir`) and writes the manifest
    /// to `manifest_path`.
    pub fn finish(mut self, dir: &Path, outputs: &[&str], manifest_path: &Path) -> Result<Self, CliError> {
        for o in outputs {
            let h = sha256_file(&dir.join(o))?;
            self.outputs.push(FileHash {
                path: o.to_string(),
                sha256: h,
            });
        }
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        std::fs::write(manifest_path, text).map_err(|e| CliError::io(manifest_path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
    }

    /// Re-hashes every listed output relative to `dir`.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for o in &self.outputs {
            let p = dir.join(&o.path);
            let found = sha256_file(&p)?;
            if found != o.sha256 {
                return Err(CliError::HashMismatch {
                    path: p.display().to_string(),
                    expected: o.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Manifest location for a command writing a single file: a sidecar next
/// to it.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_verify_on_reread() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n1\n").unwrap();
        let m = RunManifest::new("test", 4)
            .finish(dir.path(), &["a.csv"], &dir.path().join(MANIFEST_NAME))
            .unwrap();
        let back = RunManifest::load(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n2\n").unwrap();
        assert!(matches!(back.verify(dir.path()), Err(CliError::HashMismatch { .. })));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(sidecar_path(Path::new("/x/y.sgte")), Path::new("/x/y.sgte.manifest.json"));
    }
}
