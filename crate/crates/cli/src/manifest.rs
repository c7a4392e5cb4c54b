//! Run manifests and output-directory bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";
pub const FAILED_MARKER: &str = "FAILED";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Everything needed to audit and replay one command. No timestamps, so two
/// identical runs write identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub args: BTreeMap<String, Value>,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, Value>,
    pub notes: Vec<String>,
}

/// Output directory of one command. Files are registered as they are
/// written; the manifest goes last, so its presence means success.
pub struct RunDir {
    pub dir: PathBuf,
    manifest: Manifest,
    /// Outputs whose bytes legitimately differ between identical runs.
    unhashed: Vec<String>,
}

impl RunDir {
    pub fn create(dir: PathBuf, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for stale in [MANIFEST, FAILED_MARKER] {
            let p = dir.join(stale);
            if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        let json = cfg.to_json();
        Ok(RunDir {
            dir,
            manifest: Manifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                config_hash: sha256_hex(json.as_bytes()),
                args: BTreeMap::new(),
                seed: cfg.seed,
                stage_seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                counts: BTreeMap::new(),
                notes: Vec::new(),
            },
            unhashed: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn arg(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .args
            .insert(key.to_string(), serde_json::to_value(value).expect("arg serializes"));
    }

    pub fn count(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .counts
            .insert(key.to_string(), serde_json::to_value(value).expect("count serializes"));
    }

    pub fn note(&mut self, note: impl Into<String>) {
        let note = note.into();
        log::warn!("{note}");
        self.manifest.notes.push(note);
    }

    /// Records and returns the seed of a labeled stage.
    pub fn stage_seed(&mut self, label: &str) -> u64 {
        let s = self.manifest.config.stage_seed(label);
        self.manifest.stage_seeds.insert(label.to_string(), s);
        s
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Writes an output file through `f` and registers it.
    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<PathBuf> {
        let path = self.path(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        self.register(name);
        Ok(path)
    }

    /// Registers a file written by other means.
    pub fn register(&mut self, name: &str) {
        self.manifest.outputs.insert(name.to_string(), String::new());
    }

    /// Registers a file whose contents carry wall-clock data; it is listed
    /// but not hashed.
    pub fn register_unhashed(&mut self, name: &str) {
        self.register(name);
        self.unhashed.push(name.to_string());
    }

    pub fn finish(mut self) -> Result<Manifest> {
        let names: Vec<String> = self.manifest.outputs.keys().cloned().collect();
        for name in names {
            let digest = if self.unhashed.contains(&name) {
                "unhashed: contains wall-clock timings".to_string()
            } else {
                file_digest(&self.path(&name))?
            };
            self.manifest.outputs.insert(name, digest);
        }
        let path = self.path(MANIFEST);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }

    /// Marks the directory as the remains of a failed run.
    pub fn mark_failed(dir: &Path, error: &anyhow::Error) {
        if dir.is_dir() {
            let _ = fs::write(dir.join(FAILED_MARKER), format!("{error:#}\n"));
        }
    }
}
