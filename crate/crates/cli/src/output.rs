//! Run directories: metrics, plot-ready CSV and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use neurachip_core::sparse::{write_matrix_market, SparseMatrix};
use neurachip_sim::metrics::{write_heatmap_csv, write_trace_csv};
use neurachip_sim::RunResult;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NEURACHIP_OUT";
pub const DEFAULT_OUT: &str = "neurachip-out";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const RESULT: &str = "result.mtx";

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> io::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Spgemm,
    Gcn,
}

/// Everything needed to repeat a run, plus hashes of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: RunKind,
    /// Operand role (`a`, `b`, `x`, `w`) to file.
    pub inputs: BTreeMap<String, InputFile>,
    pub seed: u64,
    /// Full configuration in the `key = value` format.
    pub config: String,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

/// In-memory files of one run directory, keyed by name.
#[derive(Debug, Default, Clone)]
pub struct RunFiles {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl RunFiles {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    /// Trace, CPI histograms and heat map of one simulation, prefixed.
    pub fn add_stage(&mut self, prefix: &str, r: &RunResult) {
        let mut buf = Vec::new();
        write_trace_csv(&r.trace, &mut buf).expect("in-memory write");
        self.add(format!("{prefix}trace.csv"), buf);
        let mut buf = Vec::new();
        r.metrics.mmh_cpi.write_csv(&mut buf).expect("in-memory write");
        self.add(format!("{prefix}mmh_cpi.csv"), buf);
        let mut buf = Vec::new();
        r.metrics.hacc_cpi.write_csv(&mut buf).expect("in-memory write");
        self.add(format!("{prefix}hacc_cpi.csv"), buf);
        let mut buf = Vec::new();
        write_heatmap_csv(&r.metrics.heatmap, &mut buf).expect("in-memory write");
        self.add(format!("{prefix}heatmap.csv"), buf);
    }

    pub fn add_metrics(&mut self, json: String) {
        self.add(METRICS, (json + "\n").into_bytes());
    }

    pub fn add_result(&mut self, m: &SparseMatrix<f64>) {
        let mut buf = Vec::new();
        write_matrix_market(m, &mut buf).expect("in-memory write");
        self.add(RESULT, buf);
    }

    pub fn add_config(&mut self, text: &str) {
        self.add("config.txt", text.as_bytes().to_vec());
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect()
    }

    /// Writes every file and then the manifest into `dir`.
    pub fn write(&self, dir: &Path, manifest: &Manifest) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        let json = serde_json::to_string_pretty(manifest).expect("manifest serialize");
        fs::write(dir.join(MANIFEST), json + "\n")
    }
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn flag_beats_environment() {
        assert_eq!(out_root(Some(Path::new("x"))), PathBuf::from("x"));
    }
}
