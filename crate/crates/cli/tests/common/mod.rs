// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_MODEL: &str = "[model]\nd_model = 16\nn_heads = 2\nn_layers = 2\nd_ff = 32\n";

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    /// Run directory printed on success.
    pub fn dir(&self) -> PathBuf {
        assert_eq!(self.code, 0, "command failed: {}", self.stderr);
        PathBuf::from(self.stdout.trim())
    }
}

pub fn tarot(out_dir: &Path, args: &[&str]) -> Outcome {
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_tarot"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs");
    Outcome {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A generated task and a briefly trained small model.
pub struct Fixture {
    pub root: tempfile::TempDir,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
}

impl Fixture {
    pub fn new(train_steps: usize) -> Self {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("runs");
        let data = tarot(&out, &["gen-data", "--seed", "11"]).dir();
        let cfg = write(root.path(), "model.toml", SMALL_MODEL);
        let steps = train_steps.to_string();
        let corpus = data.join("corpus.jsonl");
        let train = tarot(
            &out,
            &["train-base", "--corpus", path(&corpus), "--config", path(&cfg), "--steps", &steps, "--seed", "11"],
        )
        .dir();
        Self {
            checkpoint: train.join("checkpoint.bin"),
            root,
            data,
        }
    }

    pub fn out(&self) -> PathBuf {
        self.root.path().join("runs")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data.join(format!("{name}.jsonl"))
    }
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

pub fn csv_rows(p: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(p).unwrap().records().map(|r| r.unwrap()).collect()
}

/// Every file under `dir`, relative path → bytes.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
