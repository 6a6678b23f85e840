//! Per-run provenance record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Every resolved setting.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Path to SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Regular files under `path` (or `path` itself), sorted, skipping run manifests.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if path.is_file() {
        out.push(path.to_path_buf());
    } else if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            out.extend(files_under(&e)?);
        }
    }
    Ok(out)
}

pub fn hash_paths(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for f in files_under(p)? {
            out.insert(f.to_string_lossy().into_owned(), sha256_file(&f)?);
        }
    }
    Ok(out)
}

/// `out/` gets `out/run_manifest.json`; a file `out.ext` gets `out.ext.run.json`.
pub fn default_manifest_path(primary_output: &Path) -> PathBuf {
    if primary_output.is_dir() {
        primary_output.join(MANIFEST_FILE)
    } else {
        let mut name = primary_output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        primary_output.with_file_name(name)
    }
}

/// Collects provenance while a command runs.
#[derive(Debug)]
pub struct RunRecorder {
    command: String,
    argv: Vec<String>,
    started_at: String,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            started_at: now(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes inputs and outputs and writes the manifest.
    pub fn finish(self, config: Value, manifest_path: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            argv: self.argv,
            config,
            seeds: self.seeds,
            inputs: hash_paths(&self.inputs)?,
            outputs: hash_paths(&self.outputs)?,
            started_at: self.started_at,
            finished_at: now(),
        };
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(manifest)
    }
}
