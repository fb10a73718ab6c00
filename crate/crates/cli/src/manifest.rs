//! Per-workdir record of completed stages and the workdir lock.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash over the stage name, its configuration and its input hashes.
    pub fingerprint: String,
    pub config_hash: String,
    /// Path (relative to the workdir when inside it) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(workdir: &Path) -> Result<Self> {
        let path = workdir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, workdir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        refloc::model::write_atomic(&workdir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }

    /// The manifest with wall times zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        for r in m.stages.values_mut() {
            r.wall_seconds = 0.0;
        }
        m
    }

    /// Whether `stage` ran with this fingerprint and its outputs are still
    /// on disk unchanged.
    pub fn is_current(&self, workdir: &Path, stage: &str, fingerprint: &str) -> Result<bool> {
        let Some(r) = self.stages.get(stage) else {
            return Ok(false);
        };
        if r.fingerprint != fingerprint {
            return Ok(false);
        }
        for (rel, hash) in &r.outputs {
            let p = resolve(workdir, rel);
            if !p.exists() || hash_path(&p)? != *hash {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Manifest key of `path`: relative to the workdir when inside it.
pub fn display_key(workdir: &Path, path: &Path) -> String {
    path.strip_prefix(workdir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| path.to_string_lossy().into_owned())
}

fn resolve(workdir: &Path, key: &str) -> PathBuf {
    let p = Path::new(key);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path, h: &mut Sha256) -> Result<()> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

/// Content hash of a file, or of a directory as the sorted list of its
/// relative file names and contents.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0]);
            hash_file(&path.join(&rel), &mut h)?;
        }
    } else {
        hash_file(path, &mut h)?;
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Exclusive hold on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir)?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(refloc::Error::Locked(workdir.to_path_buf()))
                .with_context(|| format!("remove {} if no other stage is running", path.display())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
