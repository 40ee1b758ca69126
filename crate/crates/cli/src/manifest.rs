use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the manifest's directory for outputs, as given for inputs.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_time_seconds: f64,
    pub stages: Vec<StageTime>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn hash_file(path: &Path) -> CliResult<(u64, String)> {
    let bytes = fs::read(path)?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

pub fn record(path: &Path, label: String) -> CliResult<FileRecord> {
    let (bytes, sha256) = hash_file(path)?;
    Ok(FileRecord { path: label, bytes, sha256 })
}

/// Every regular file below `root`, sorted, excluding the manifest itself.
pub fn inventory(root: &Path) -> CliResult<Vec<FileRecord>> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path != root.join(MANIFEST_NAME) {
                files.push(path);
            }
        }
    }
    files.sort();
    files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/");
            record(p, rel)
        })
        .collect()
}

/// Collects timings and inputs while a command runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<FileRecord>,
    started: f64,
    clock: std::time::Instant,
    stages: Vec<StageTime>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            started: unix_now(),
            clock: std::time::Instant::now(),
            stages: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(record(path, path.display().to_string())?);
        Ok(())
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let t = std::time::Instant::now();
        let out = f()?;
        self.stages.push(StageTime { stage: stage.to_string(), seconds: t.elapsed().as_secs_f64() });
        Ok(out)
    }

    fn build(self, outputs: Vec<FileRecord>) -> RunManifest {
        RunManifest {
            tool: "tagflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs,
            started_unix: self.started,
            finished_unix: unix_now(),
            wall_time_seconds: self.clock.elapsed().as_secs_f64(),
            stages: self.stages,
        }
    }

    /// Hashes everything under `out_dir` and writes the manifest there.
    pub fn finish(self, out_dir: &Path) -> CliResult<RunManifest> {
        let manifest = self.build(inventory(out_dir)?);
        fs::write(out_dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Manifest over an explicit output list, labelled by file name, for
    /// commands that share a directory with other files. Not written.
    pub fn finish_files(self, files: &[PathBuf]) -> CliResult<RunManifest> {
        let outputs = files
            .iter()
            .map(|p| record(p, p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(self.build(outputs))
    }
}

/// Re-hashes every output listed in a manifest; returns the mismatches.
pub fn verify(out_dir: &Path, manifest: &RunManifest) -> CliResult<Vec<String>> {
    let mut bad = Vec::new();
    for f in &manifest.outputs {
        let p = out_dir.join(&f.path);
        match hash_file(&p) {
            Ok((bytes, sha)) if bytes == f.bytes && sha == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}
