// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run directories and manifests.
//!
//! A run directory is named by the command and a hash of everything that
//! determines its outputs: the command, the resolved config, the seed and
//! the hashes of its input files. Re-running with the same inputs rewrites
//! the same directory with the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads an input file, returning its bytes and hash.
pub fn read_input(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    let hash = sha256_hex(&bytes);
    Ok((bytes, hash))
}

pub fn to_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("config types serialize to JSON")
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a Value,
    seed: u64,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock_seconds: Option<f64>,
}

pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: Value,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Option<Instant>,
}

impl Run {
    /// Creates `out_dir/<command>-<hash>`.
    pub fn create(
        out_dir: &Path,
        command: &str,
        config: Value,
        seed: u64,
        inputs: BTreeMap<String, String>,
        timing: bool,
    ) -> Result<Self> {
        let identity = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "seed": seed,
            "inputs": inputs,
        });
        let hash = sha256_hex(identity.to_string().as_bytes());
        let dir = out_dir.join(format!("{command}-{}", &hash[..16]));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            config,
            seed,
            inputs,
            outputs: BTreeMap::new(),
            started: timing.then(Instant::now),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path.display().to_string(), e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize to JSON");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json`. `status` is `ok` or a failure message.
    pub fn finish(self, status: &str) -> Result<PathBuf> {
        let manifest = Manifest {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            seed: self.seed,
            inputs: &self.inputs,
            outputs: &self.outputs,
            status,
            wall_clock_seconds: self.started.map(|t| t.elapsed().as_secs_f64()),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path.display().to_string(), e))?;
        Ok(self.dir)
    }
}

/// CSV text from a header and rows of already formatted fields.
pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV write");
    for row in rows {
        w.write_record(&row).expect("in-memory CSV write");
    }
    w.into_inner().expect("in-memory CSV flush")
}
