//! Run manifests: every subcommand records its resolved configuration, input
//! and output digests, seed, and timestamps next to its outputs — also when
//! it fails, with the error noted — so any artifact can be traced back to the
//! exact invocation that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use longwave::Result;

/// A file the run read or wrote, with its content digest.
#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Reproducibility envelope written as `<command>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    /// Fully resolved configuration after flag / config-file / default
    /// precedence has been applied.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(digest),
    })
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Tracks one subcommand invocation from start to manifest.
pub struct Run {
    command: String,
    seed: u64,
    started_at: String,
    config: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    out_dir: PathBuf,
}

impl Run {
    /// Start a run; creates the output directory. The seed defaults to 0
    /// until [`Run::seed`] records the resolved one.
    pub fn new(command: &str, out_dir: &Path) -> Result<Run> {
        fs::create_dir_all(out_dir)?;
        Ok(Run {
            command: command.to_string(),
            seed: 0,
            started_at: now(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    /// Record the resolved configuration to echo into the manifest.
    pub fn config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    /// Record the resolved master seed.
    pub fn seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Digest an input file now, before it is consumed.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(sha256_file(path)?);
        Ok(())
    }

    /// Register a path the command will (or did) write. Digested at finish;
    /// registering before writing means aborted runs still list the partial
    /// file next to the error marker.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Path of a named artifact inside the run's output directory.
    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Write the manifest, digesting every registered output that exists.
    /// Called on success and on failure alike.
    pub fn finish(self, error: Option<String>) -> Result<PathBuf> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for path in &self.outputs {
            if path.exists() {
                outputs.push(sha256_file(path)?);
            }
        }
        let manifest = RunManifest {
            tool: "longwave",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            seed: self.seed,
            started_at: self.started_at,
            finished_at: now(),
            config: self.config,
            inputs: self.inputs,
            outputs,
            error,
        };
        let path = self.out_dir.join(format!("{}.manifest.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}
