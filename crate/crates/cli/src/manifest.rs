use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rsvqa::fsutil::{sha256_hex, write_atomic};
use rsvqa::{Error, Result};
use serde::Serialize;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Record of one command run; every produced file is listed with its hash.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputFile>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if meta.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, inputs: &[&Path], started: u128) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
            started_unix_ms: started,
            finished_unix_ms: 0,
        }
    }

    /// Hashes `paths` (directories recursively, skipping earlier manifests)
    /// and writes the manifest atomically to `dest`.
    pub fn finish(mut self, paths: &[&Path], dest: &Path) -> Result<()> {
        let mut files = Vec::new();
        for p in paths {
            collect_files(p, &mut files)?;
        }
        for f in files {
            if f == dest || f.file_name().is_some_and(|n| n == RUN_MANIFEST) {
                continue;
            }
            let bytes = fs::read(&f).map_err(|e| Error::Io {
                path: f.clone(),
                source: e,
            })?;
            self.outputs.push(OutputFile {
                path: f.display().to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        self.finished_unix_ms = now_ms();
        let mut json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        json.push(b'\n');
        write_atomic(dest, &json)
    }
}
