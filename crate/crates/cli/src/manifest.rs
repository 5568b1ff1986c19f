//! Run manifests: what a command was asked to do, digests of what it read
//! and wrote, and how long each phase took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stylebank_core::digest::fnv1a64;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    /// 64-bit FNV-1a of the file bytes, hex.
    pub fnv1a: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub phases: Vec<Phase>,
    pub total_ms: f64,
    /// Command-specific numbers (losses, payload sizes, distances).
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn phase_ms(&self, name: &str) -> Option<f64> {
        self.phases.iter().find(|p| p.name == name).map(|p| p.ms)
    }

    pub fn output_digest(&self, path: &Path) -> Option<&str> {
        self.outputs.iter().find(|d| d.path == path).map(|d| d.fnv1a.as_str())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn digest_file(path: &Path) -> CliResult<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        fnv1a: format!("{:016x}", fnv1a64(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Collects a manifest while a command runs.
pub struct Run {
    start: Instant,
    manifest: RunManifest,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            start: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seed,
                threads: rayon::current_num_threads(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                phases: Vec::new(),
                total_ms: 0.0,
                metrics: BTreeMap::new(),
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Times `f` as a named phase.
    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let t = Instant::now();
        let out = f();
        self.manifest.phases.push(Phase {
            name: name.to_string(),
            ms: t.elapsed().as_secs_f64() * 1e3,
        });
        log::info!("{} phase {name}: {:.2} ms", self.manifest.command, self.manifest.phases.last().unwrap().ms);
        out
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.manifest.metrics.insert(name.to_string(), value);
    }

    pub fn set_config(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(map) = &mut self.manifest.config {
            map.insert(key.to_string(), value);
        }
    }

    /// Digests every recorded file and stamps the total time.
    pub fn finish(mut self) -> CliResult<RunManifest> {
        let (inputs, outputs) = (std::mem::take(&mut self.inputs), std::mem::take(&mut self.outputs));
        let (ins, outs) = self.phase("digest", || {
            let ins = inputs.iter().map(|p| digest_file(p)).collect::<CliResult<Vec<_>>>()?;
            let outs = outputs.iter().map(|p| digest_file(p)).collect::<CliResult<Vec<_>>>()?;
            Ok((ins, outs))
        })?;
        self.manifest.inputs = ins;
        self.manifest.outputs = outs;
        self.manifest.total_ms = self.start.elapsed().as_secs_f64() * 1e3;
        Ok(self.manifest)
    }
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}
