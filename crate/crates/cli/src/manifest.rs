//! Run manifests: config echo, file digests, seeds and timing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use qsd_core::io::{to_json_string, write_atomic};
use qsd_core::{QsdError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SeedSource};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output directory, `/` separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngProvenance {
    pub generator: String,
    pub key_derivation: String,
    pub master_seed: u64,
    pub seed_source: SeedSource,
    pub first_index: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_s: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub files: Vec<FileDigest>,
    pub checks: Vec<CheckOutcome>,
    pub rng: RngProvenance,
    pub wall_clock: WallClock,
}

impl RunManifest {
    pub fn failed_checks(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(root: &Path, rel: &str) -> Result<FileDigest> {
    let bytes = fs::read(root.join(rel))?;
    Ok(FileDigest {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

/// Every file is written by this one owner, which records its digest.
pub struct OutputWriter {
    root: PathBuf,
    files: Vec<FileDigest>,
    started: Instant,
    started_unix_s: f64,
}

impl OutputWriter {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| {
            QsdError::Config(format!("cannot create output directory {}: {e}", root.display()))
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(&path, bytes)?;
        self.files.push(FileDigest {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, to_json_string(value)?.as_bytes())
    }

    /// Writes `manifest.json` and returns the manifest and its path.
    pub fn finish(
        self,
        command: &str,
        config: &RunConfig,
        seed_source: SeedSource,
        inputs: Vec<FileDigest>,
        checks: Vec<CheckOutcome>,
    ) -> Result<(RunManifest, PathBuf)> {
        let manifest = RunManifest {
            tool: "qsd".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            inputs,
            files: self.files,
            checks,
            rng: RngProvenance {
                generator: "chacha8".into(),
                key_derivation: "splitmix64(master_seed ^ domain)".into(),
                master_seed: config.params.master_seed,
                seed_source,
                first_index: config.first_index,
                count: config.ensemble_size as u64,
            },
            wall_clock: WallClock {
                started_unix_s: self.started_unix_s,
                elapsed_s: self.started.elapsed().as_secs_f64(),
            },
        };
        let path = self.root.join(MANIFEST_NAME);
        write_atomic(&path, to_json_string(&manifest)?.as_bytes())?;
        Ok((manifest, path))
    }
}

/// Files whose digest no longer matches the manifest.
pub fn verify(root: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for f in &manifest.files {
        match digest_file(root, &f.path) {
            Ok(d) if d == *f => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_reference() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn writer_records_digests_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = OutputWriter::create(dir.path()).unwrap();
        w.write("a/b.txt", b"abc").unwrap();
        let (m, path) = w
            .finish("test", &RunConfig::default(), SeedSource::Config, vec![], vec![])
            .unwrap();
        assert!(path.exists());
        assert_eq!(m.files[0].path, "a/b.txt");
        assert!(verify(dir.path(), &m).unwrap().is_empty());
        fs::write(dir.path().join("a/b.txt"), b"abd").unwrap();
        assert_eq!(verify(dir.path(), &m).unwrap(), vec!["a/b.txt".to_string()]);
    }
}
