//! Shared helpers for the acceptance suite: scenario configs and CSV
//! comparison.

use bilevel_kfac_cli::{run, ExperimentConfig, RunOutcome};
use serde_json::{json, Value};
use std::path::Path;

/// One acceptance line.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: &'static str,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {}: {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title,
            self.detail
        )
    }
}

/// Run a JSON config quietly in `dir`.
pub fn run_json(mut doc: Value, dir: &Path) -> Result<RunOutcome, String> {
    doc["out_dir"] = json!(dir);
    let cfg = ExperimentConfig::from_value(doc, None).map_err(|e| e.to_string())?;
    run(&cfg, true).map_err(|e| format!("{e:#}"))
}

pub fn result(out: &RunOutcome, key: &str) -> Result<f64, String> {
    out.manifest
        .results
        .get(key)
        .copied()
        .ok_or_else(|| format!("result `{key}` missing"))
}

/// Column of a history CSV as floats.
pub fn history_column(path: &Path, column: &str) -> Result<Vec<f64>, String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let idx = rd
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| format!("no column {column}"))?;
    rd.records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            r[idx].parse::<f64>().map_err(|e| e.to_string())
        })
        .collect()
}

/// Compare every CSV under two run directories, skipping wall-time columns.
/// Returns the number of numeric cells compared.
pub fn compare_runs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err("no CSV files produced".into());
    }
    let mut cells = 0;
    for name in names {
        let read = |dir: &Path| -> Result<(Vec<String>, Vec<Vec<String>>), String> {
            let mut rd = csv::Reader::from_path(dir.join(&name)).map_err(|e| e.to_string())?;
            let h = rd.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
            let rows = rd
                .records()
                .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            Ok((h, rows))
        };
        let (ha, ra) = read(a)?;
        let (hb, rb) = read(b)?;
        if ha != hb || ra.len() != rb.len() {
            return Err(format!("{} differs in shape", name.to_string_lossy()));
        }
        for (x, y) in ra.iter().zip(&rb) {
            for ((h, u), v) in ha.iter().zip(x).zip(y) {
                if h == "wall_ms" || h == "elapsed_ms" {
                    continue;
                }
                if u != v {
                    return Err(format!("{} column {h}: {u} vs {v}", name.to_string_lossy()));
                }
                cells += 1;
            }
        }
    }
    Ok(cells)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
