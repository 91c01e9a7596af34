//! `run.json`: what a command read, wrote and how long it took.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Timing {
    pub phase: String,
    pub ms: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub config_paths: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    /// sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
    pub timings: Vec<Timing>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

impl RunManifest {
    pub fn new(argv: Vec<String>) -> RunManifest {
        RunManifest {
            command: String::new(),
            version: env!("CARGO_PKG_VERSION"),
            argv,
            config_paths: Vec::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings: Vec::new(),
        }
    }

    pub fn time<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let r = f();
        self.timings.push(Timing {
            phase: phase.to_string(),
            ms: start.elapsed().as_secs_f64() * 1e3,
        });
        r
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), sha256_bytes(bytes));
    }

    pub fn config(&mut self, path: &Path) -> Result<()> {
        self.config_paths.push(path.display().to_string());
        self.input(path)
    }

    pub fn artifact(&mut self, name: &str, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.artifacts.insert(name.to_string(), h);
        Ok(())
    }

    pub fn artifact_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.insert(name.to_string(), sha256_bytes(bytes));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// For commands without an output directory.
    pub fn emit_stderr(&self) -> Result<()> {
        eprintln!("run: {}", serde_json::to_string(self)?);
        Ok(())
    }
}
