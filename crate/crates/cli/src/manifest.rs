//! Run directories: a manifest is written before any output and marked
//! complete only after every output has been flushed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub variant: Option<String>,
    pub size: Option<usize>,
    pub step: Option<usize>,
    pub value: f64,
}

impl SummaryRow {
    pub fn new(metric: &str, value: f64) -> Self {
        SummaryRow {
            metric: metric.into(),
            variant: None,
            size: None,
            step: None,
            value,
        }
    }

    pub fn size(mut self, s: usize) -> Self {
        self.size = Some(s);
        self
    }

    pub fn step(mut self, t: usize) -> Self {
        self.step = Some(t);
        self
    }

    pub fn variant(mut self, v: impl Into<String>) -> Self {
        self.variant = Some(v.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub verb: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    pub complete: bool,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub summary: Vec<SummaryRow>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn code_version() -> String {
    format!("flexipatch {}", env!("CARGO_PKG_VERSION"))
}

/// An output directory in the middle of a run.
pub struct RunDir {
    pub dir: PathBuf,
    manifest: Manifest,
    files: Vec<String>,
}

impl RunDir {
    pub fn start(dir: &Path, verb: &str, config: &RunConfig) -> Result<RunDir> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                verb: verb.into(),
                code_version: code_version(),
                seed: config.seed,
                threads: rayon::current_num_threads(),
                config: config.clone(),
                complete: false,
                outputs: BTreeMap::new(),
                summary: Vec::new(),
            },
            files: Vec::new(),
        };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Register a file written by someone else.
    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.track(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(f), value)?;
        self.track(name);
        Ok(())
    }

    /// Hash every output and mark the run complete.
    pub fn finish(mut self, summary: Vec<SummaryRow>) -> Result<Manifest> {
        for name in &self.files {
            let bytes = std::fs::read(self.dir.join(name)).with_context(|| format!("hashing {}", name))?;
            self.manifest.outputs.insert(name.clone(), sha256_hex(&bytes));
        }
        self.manifest.summary = summary;
        self.manifest.complete = true;
        self.write_manifest()?;
        Ok(self.manifest)
    }
}
