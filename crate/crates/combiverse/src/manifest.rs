//! Run manifest: stage status and content digests of every artifact.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use combiverse_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decompose,
    Reconstruct,
    Combine,
    Ablate,
}

impl Stage {
    pub const PIPELINE: [Stage; 3] = [Stage::Decompose, Stage::Reconstruct, Stage::Combine];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Decompose => "decompose",
            Stage::Reconstruct => "reconstruct",
            Stage::Combine => "combine",
            Stage::Ablate => "ablate",
        }
    }

    /// Stages whose output this one reads.
    pub fn upstream(&self) -> &'static [Stage] {
        match self {
            Stage::Decompose => &[],
            Stage::Reconstruct => &[Stage::Decompose],
            Stage::Combine | Stage::Ablate => &[Stage::Decompose, Stage::Reconstruct],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    /// Digest of the inputs: relevant config section, seed and upstream digests.
    pub fingerprint: String,
    /// Run-directory-relative path to SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: serde_json::Value,
    pub stages: BTreeMap<Stage, StageRecord>,
}

/// Why a stage has to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Freshness {
    Current,
    Missing,
    Changed,
    Corrupt(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

impl Manifest {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            version: VERSION,
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        if m.version != VERSION {
            return Err(Error::validation(format!(
                "{} has unsupported version {}",
                path.display(),
                m.version
            )));
        }
        Ok(Some(m))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&run_dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(&stage)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stage(stage).is_some_and(|r| r.complete)
    }

    /// Checks a completed stage against `fingerprint` and the files on disk.
    pub fn freshness(&self, stage: Stage, fingerprint: &str, run_dir: &Path) -> Result<Freshness> {
        let Some(r) = self.stage(stage).filter(|r| r.complete) else {
            return Ok(Freshness::Missing);
        };
        if r.fingerprint != fingerprint {
            return Ok(Freshness::Changed);
        }
        for (rel, digest) in &r.artifacts {
            let path = run_dir.join(rel);
            if !path.is_file() || &file_digest(&path)? != digest {
                return Ok(Freshness::Corrupt(rel.clone()));
            }
        }
        Ok(Freshness::Current)
    }

    /// Marks `stage` as running and invalidates everything downstream.
    pub fn begin(&mut self, stage: Stage, fingerprint: String) {
        let prior = self.stages.remove(&stage);
        let artifacts = if prior.as_ref().is_some_and(|p| p.fingerprint == fingerprint) {
            prior.map(|p| p.artifacts).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        self.stages.insert(
            stage,
            StageRecord {
                complete: false,
                fingerprint,
                artifacts,
                error: None,
            },
        );
        for (s, r) in self.stages.iter_mut() {
            if s.upstream().contains(&stage) {
                r.complete = false;
            }
        }
    }

    pub fn finish(&mut self, stage: Stage, artifacts: BTreeMap<String, String>) {
        let r = self.stages.entry(stage).or_default();
        r.complete = true;
        r.artifacts = artifacts;
        r.error = None;
    }

    pub fn fail(&mut self, stage: Stage, error: &Error) {
        let r = self.stages.entry(stage).or_default();
        r.complete = false;
        r.error = Some(error.to_string());
    }

    /// Artifact digests of every stage, keyed by path.
    pub fn all_digests(&self) -> BTreeMap<String, String> {
        self.stages.values().flat_map(|r| r.artifacts.clone()).collect()
    }
}

/// Digests for `paths`, keyed by their path relative to `run_dir`.
pub fn digest_files(run_dir: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let rel = p
                .strip_prefix(run_dir)
                .unwrap_or(p)
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            Ok((rel, file_digest(p)?))
        })
        .collect()
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io {
                path: path.clone(),
                source: std::io::Error::new(
                    e.kind(),
                    "run directory is in use by another process; delete the lock file if that process is gone",
                ),
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
