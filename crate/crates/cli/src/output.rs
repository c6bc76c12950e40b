use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// 12 significant digits, locale-free.
pub fn num(x: f64) -> String {
    format!("{x:.11e}")
}

/// Comma-separated table with a header row and LF endings.
#[derive(Debug)]
pub struct Csv {
    width: usize,
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self { width: header.len(), buf }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.width);
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf.into_bytes()
    }
}

#[derive(Debug)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn csv(name: &str, csv: Csv) -> Self {
        Self { name: name.into(), bytes: csv.into_bytes() }
    }

    pub fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value).context("serializing report")?;
        bytes.push(b'\n');
        Ok(Self { name: name.into(), bytes })
    }
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: &'static str,
    pub scenario_sha256: String,
    pub seed: u64,
    pub eps_x: f64,
    pub wall_time_s: f64,
    pub pass: bool,
    pub summary: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a temporary sibling and rename into place.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, &target).with_context(|| format!("renaming into {}", target.display()))?;
    Ok(target)
}

/// Write every artifact, then the manifest that lists them.
pub fn write_all(dir: &Path, artifacts: &[Artifact], mut manifest: RunManifest) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let mut written = Vec::with_capacity(artifacts.len() + 1);
    for a in artifacts {
        // Names are fixed by the experiments; refuse anything that could escape `dir`.
        assert!(!a.name.contains(['/', '\\']) && !a.name.starts_with('.'), "bad artifact name {}", a.name);
        written.push(write_atomic(dir, &a.name, &a.bytes)?);
        manifest.files.push(FileEntry { name: a.name.clone(), bytes: a.bytes.len(), sha256: sha256_hex(&a.bytes) });
    }
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    written.push(write_atomic(dir, "manifest.json", &bytes)?);
    Ok(written)
}
