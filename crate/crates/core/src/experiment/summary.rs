use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::config::Variant;
use super::run::write_file;

/// Columns of `summary.csv` after `model` and `seeds`, each the
/// `metrics.txt` key it aggregates.
pub const SUMMARY_METRICS: [(&str, &str); 5] = [
    ("macro_f1", "macro_f1"),
    ("macro_precision", "macro_precision"),
    ("macro_recall", "macro_recall"),
    ("test_accuracy", "accuracy"),
    ("balanced_accuracy", "balanced_accuracy"),
];

/// One table row: mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub variant: Option<Variant>,
    pub seeds: usize,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl SummaryRow {
    pub fn cell(&self, i: usize) -> String {
        format!("{:.4} ± {:.4}", self.mean[i], self.std[i])
    }
}

/// Mean and standard deviation with the n − 1 denominator; a single value
/// has deviation 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn metrics_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            metrics_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.txt") {
            out.push(p);
        }
    }
    Ok(())
}

/// Aggregates every `metrics.txt` under `dir` by model and writes
/// `dir/summary.csv`. Reads nothing but the per-seed result files.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    metrics_files(dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no metrics.txt files under {}", dir.display())));
    }
    let mut groups: BTreeMap<String, (Option<Variant>, Vec<[f64; 5]>)> = BTreeMap::new();
    for f in &files {
        let kv = parse_kv(&fs::read_to_string(f).map_err(|e| Error::io(f, e))?);
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Validation(format!("{}: missing {k}", f.display())))
        };
        let model = get("model")?.clone();
        let variant = kv.get("variant").and_then(|v| v.parse().ok());
        let mut vals = [0.0; 5];
        for (slot, (_, key)) in vals.iter_mut().zip(SUMMARY_METRICS) {
            *slot = get(key)?
                .parse()
                .map_err(|_| Error::Validation(format!("{}: {key} is not a number", f.display())))?;
        }
        let entry = groups.entry(model).or_insert((variant, Vec::new()));
        entry.1.push(vals);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|(model, (variant, runs))| {
            let mut mean = [0.0; 5];
            let mut std = [0.0; 5];
            for i in 0..5 {
                let col: Vec<f64> = runs.iter().map(|r| r[i]).collect();
                (mean[i], std[i]) = mean_std(&col);
            }
            SummaryRow {
                model,
                variant,
                seeds: runs.len(),
                mean,
                std,
            }
        })
        .collect();
    rows.sort_by(|a, b| (a.variant, &a.model).cmp(&(b.variant, &b.model)));

    let mut csv = String::from("model,seeds");
    for (name, _) in SUMMARY_METRICS {
        csv.push_str(&format!(",{name} (mean ± std over seeds)"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("\"{}\",{}", r.model, r.seeds));
        for i in 0..5 {
            csv.push_str(&format!(",{}", r.cell(i)));
        }
        csv.push('\n');
    }
    write_file(&dir.join("summary.csv"), &csv)?;
    Ok(rows)
}
