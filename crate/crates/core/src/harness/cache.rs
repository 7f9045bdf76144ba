//! Stage artifacts under `out/<stage>/`, each with a manifest of file hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    /// Hash of the stage name, its config subset and its input digests.
    pub key: String,
    /// File name → SHA-256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Identifies the stage output for downstream keys. Only file contents
    /// count, so a rerun that reproduces the same files leaves downstream
    /// stages cached.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&self.files).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a sequence of labeled parts; each part is length-prefixed.
pub fn stage_key(parts: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        for s in [k.as_bytes(), v.as_bytes()] {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s);
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheState {
    /// No manifest yet.
    Missing,
    /// A manifest exists but for different inputs.
    Outdated,
    Fresh(Manifest),
}

pub fn stage_dir(out: &Path, stage: &str) -> PathBuf {
    out.join(stage)
}

/// Looks up `stage` under `out`. A manifest whose key matches but whose files
/// no longer hash to the recorded values is an error, not a cache miss.
pub fn check(out: &Path, stage: &str, key: &str) -> Result<CacheState> {
    let dir = stage_dir(out, stage);
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(CacheState::Missing);
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::Stale(format!("{}: unreadable manifest ({e})", path.display())))?;
    if manifest.stage != stage || manifest.key != key {
        return Ok(CacheState::Outdated);
    }
    for (name, expected) in &manifest.files {
        let f = dir.join(name);
        if !f.exists() {
            return Err(Error::Stale(format!("{stage}/{name} is missing; delete {} to rebuild", dir.display())));
        }
        if file_hash(&f)? != *expected {
            return Err(Error::Stale(format!(
                "{stage}/{name} does not match its manifest hash; delete {} to rebuild",
                dir.display()
            )));
        }
    }
    Ok(CacheState::Fresh(manifest))
}

/// Empties the stage directory before a (re)run.
pub fn reset(out: &Path, stage: &str) -> Result<PathBuf> {
    let dir = stage_dir(out, stage);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Hashes the named files and writes the manifest last, so a crash mid-stage
/// leaves the stage `Missing`.
pub fn commit(out: &Path, stage: &str, key: &str, files: &[&str]) -> Result<Manifest> {
    let dir = stage_dir(out, stage);
    let mut hashes = BTreeMap::new();
    for name in files {
        hashes.insert(name.to_string(), file_hash(&dir.join(name))?);
    }
    let manifest = Manifest { stage: stage.into(), key: key.into(), files: hashes };
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(manifest)
}

/// Exclusive ownership of an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
