//! Run directory artifacts: manifest, summary and history CSVs.

use anyhow::{Context, Result};
use bilevel_kfac::bilevel::OuterRecord;
use bilevel_kfac::tasks::DiagnosticRecord;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const SUMMARY_HEADER: [&str; 6] = ["method", "d", "seed", "rel_error", "alpha_star", "wall_ms"];
pub const HISTORY_HEADER: [&str; 7] = [
    "outer_iter",
    "outer_loss",
    "test_metric",
    "hypergrad_norm",
    "solver_residual",
    "solver_iters",
    "elapsed_ms",
];

pub fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// SHA-256 of the compact JSON encoding (object keys sorted), ignoring
/// `out_dir` so the same experiment hashes the same wherever it is written.
pub fn config_hash(effective: &Value) -> String {
    let mut v = effective.clone();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("out_dir");
    }
    let text = serde_json::to_string(&v).expect("JSON value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn ms(d: std::time::Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, records: &[DiagnosticRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(SUMMARY_HEADER)?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.d.to_string(),
            r.seed.to_string(),
            r.rel_error.to_string(),
            r.alpha_star.to_string(),
            ms(r.wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history(path: &Path, history: &[OuterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        w.write_record([
            r.outer_iter.to_string(),
            r.outer_loss.to_string(),
            opt(r.test_metric),
            r.hypergrad_norm.to_string(),
            opt(r.solver_residual),
            r.solver_iters.to_string(),
            ms(r.elapsed),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Generic CSV with a header and stringified rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub files: Vec<PathBuf>,
    /// Headline numbers of the run (task dependent).
    pub results: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
