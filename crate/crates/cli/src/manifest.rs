//! Run manifests. Every subcommand records what it did in a JSON file next
//! to its primary output: the resolved configuration, content hashes of the
//! inputs, the output paths, the seed and wall timings. The configuration
//! section alone is enough to replay the command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved key-values under their flag names; replaying the command is
    /// `derain <command>` plus one `--key value` per entry.
    pub config: BTreeMap<String, Value>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub timings_s: BTreeMap<String, f64>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            timings_s: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.config.insert(key.to_string(), value.into());
    }

    pub fn set_path(&mut self, key: &str, path: &Path) {
        self.set(key, path.display().to_string());
    }

    /// Records an input along with its content hash (file or directory).
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: content_hash(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn timing(&mut self, phase: &str, seconds: f64) {
        self.timings_s.insert(phase.to_string(), seconds);
    }

    /// Writes `<target name>.manifest.json` beside the target, atomically.
    pub fn write_next_to(&self, target: &Path) -> Result<PathBuf> {
        let Some(name) = target.file_name() else {
            bail!("{} has no file name to anchor a manifest to", target.display());
        };
        let path = target.with_file_name(format!("{}.manifest.json", name.to_string_lossy()));
        let mut body = serde_json::to_vec_pretty(self)?;
        body.push(b'\n');
        let tmp = path.with_file_name(format!(
            "{}.tmp",
            path.file_name().unwrap().to_string_lossy()
        ));
        fs::write(&tmp, &body).with_context(|| format!("cannot write {}", tmp.display()))?;
        fs::rename(&tmp, &path)
            .with_context(|| format!("cannot move manifest into place at {}", path.display()))?;
        Ok(path)
    }
}

/// Content hash of a file (its bytes) or a directory (the sorted list of
/// relative file paths and their hashes, hashed again).
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut listing = String::new();
        for rel in &files {
            let bytes = fs::read(path.join(rel))
                .with_context(|| format!("cannot read {}", path.join(rel).display()))?;
            listing.push_str(&format!("{rel}\t{}\n", hex(&Sha256::digest(&bytes))));
        }
        Ok(hex(&Sha256::digest(listing.as_bytes())))
    } else {
        let bytes =
            fs::read(path).with_context(|| format!("cannot read input {}", path.display()))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
