// SPDX-License-Identifier: MIT OR Apache-2.0

//! Result files and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    format_version: u32,
    tool: &'static str,
    tool_version: &'static str,
    command: &'a str,
    config: &'a C,
    seed: u64,
    sub_seeds: &'a BTreeMap<String, u64>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    items: usize,
    skipped: &'a [String],
    n_skipped: usize,
}

/// Collects output files of one run and writes them with a manifest.
pub struct Run {
    command: &'static str,
    dir: PathBuf,
    seed: u64,
    sub_seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    items: usize,
    skipped: Vec<String>,
}

impl Run {
    pub fn new(command: &'static str, dir: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            command,
            dir: dir.to_path_buf(),
            seed,
            sub_seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            items: 0,
            skipped: Vec::new(),
        })
    }

    pub fn sub_seed(&mut self, name: &str) -> u64 {
        let s = gim_core::data::derive_seed(self.seed, name);
        self.sub_seeds.insert(name.to_owned(), s);
        s
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    pub fn set_items(&mut self, items: usize, skipped: Vec<String>) {
        self.items = items;
        self.skipped = skipped;
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.insert(name.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().context("csv buffer")?;
        self.write(name, &bytes)
    }

    pub fn write_jsonl<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    pub fn finish(self, config: &impl Serialize) -> Result<()> {
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool: env!("CARGO_PKG_NAME"),
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config,
            seed: self.seed,
            sub_seeds: &self.sub_seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
            items: self.items,
            skipped: &self.skipped,
            n_skipped: self.skipped.len(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
