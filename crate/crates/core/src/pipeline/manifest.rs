//! Run manifest, work-directory lock and phase timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PgtError, Result};
use crate::jsonio::{append_line, read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".pgt.lock";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    /// Relative to the work directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub iteration: usize,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub phases: Vec<PhaseRecord>,
    /// Bookkeeping files that are not phase outputs.
    pub support: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PgtError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self { tool_version: env!("CARGO_PKG_VERSION").to_string(), config_hash, phases: Vec::new(), support: Vec::new() }
    }

    /// Reads the manifest under `root`, or starts one.
    pub fn open(root: &Path, config_hash: &str) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::new(config_hash.to_string()));
        }
        let mut m: RunManifest = read_json(&p)?;
        if m.config_hash != config_hash {
            // A changed config invalidates every earlier record.
            m = Self::new(config_hash.to_string());
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&root.join(MANIFEST_FILE), self)
    }

    /// Adds `rec`, replacing an earlier run of the same phase and iteration.
    /// Any other record claiming one of its outputs is dropped as stale.
    pub fn record(&mut self, rec: PhaseRecord) {
        let outs: Vec<&str> = rec.outputs.iter().map(|f| f.path.as_str()).collect();
        self.phases.retain(|p| !(p.phase == rec.phase && p.iteration == rec.iteration) && !p.outputs.iter().any(|f| outs.contains(&f.path.as_str())));
        self.phases.push(rec);
    }

    pub fn add_support(&mut self, rel: &str) {
        if !self.support.iter().any(|s| s == rel) {
            self.support.push(rel.to_string());
            self.support.sort();
        }
    }

    /// The record whose outputs include `rel`.
    pub fn producer(&self, rel: &str) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.outputs.iter().any(|f| f.path == rel))
    }

    /// Every path the manifest references (itself included).
    pub fn referenced(&self) -> Vec<String> {
        let mut v: Vec<String> = self.phases.iter().flat_map(|p| p.outputs.iter().map(|f| f.path.clone())).collect();
        v.extend(self.support.iter().cloned());
        v.push(MANIFEST_FILE.to_string());
        v.sort();
        v
    }
}

/// Exclusive hold on a work directory, released on drop.
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| PgtError::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PgtError::Config(format!(
                "{} is locked by another command; remove {} if no command is running",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(PgtError::io(&path, e)),
        }
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    phase: &'a str,
    iteration: usize,
    seconds: f64,
}

pub fn log_timing(root: &Path, phase: &str, iteration: usize, seconds: f64) -> Result<()> {
    append_line(&root.join(TIMINGS_FILE), &Timing { phase, iteration, seconds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(phase: &str, it: usize, out: &str) -> PhaseRecord {
        PhaseRecord { phase: phase.into(), iteration: it, inputs: vec![], outputs: vec![FileRef { path: out.into(), sha256: "x".into() }], metrics: BTreeMap::new() }
    }

    #[test]
    fn rerun_replaces_record() {
        let mut m = RunManifest::new("h".into());
        m.record(rec("seed", 1, "iter1/seed.jsonl"));
        m.record(rec("bootstrap", 1, "iter1/candidates.jsonl"));
        m.record(rec("seed", 1, "iter1/seed.jsonl"));
        assert_eq!(m.phases.len(), 2);
        assert_eq!(m.referenced().iter().filter(|p| *p == "iter1/seed.jsonl").count(), 1);
        assert_eq!(m.producer("iter1/candidates.jsonl").unwrap().phase, "bootstrap");
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = WorkLock::acquire(dir.path()).unwrap();
        assert!(WorkLock::acquire(dir.path()).is_err());
        drop(a);
        WorkLock::acquire(dir.path()).unwrap();
    }
}
