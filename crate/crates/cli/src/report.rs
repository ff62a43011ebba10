//! Plot-ready CSV tables from run metrics logs.
//!
//! `runs/<label>.csv` holds one run with exactly the metrics schema as
//! columns; `stats/<field>.csv` holds one statistic with a column per run,
//! rows aligned on the step.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nclip::training::{read_metrics, BatchStats, RunPaths};
use serde_json::Value;

use crate::error::CliError;

/// CSV cell for a JSON scalar; `null` becomes an empty cell.
pub(crate) fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn labels(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeMap::<String, usize>::new();
    dirs.iter()
        .map(|d| {
            let base = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}-{n}")
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub runs: Vec<PathBuf>,
    pub stats: Vec<PathBuf>,
}

pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportFiles, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::usage("report needs at least one run directory"));
    }
    let mut runs: Vec<Vec<Value>> = Vec::new();
    for d in run_dirs {
        let path = RunPaths::new(d).metrics();
        if !path.is_file() {
            return Err(CliError::usage(format!("{} has no metrics log", d.display())));
        }
        let stats = read_metrics(&path).map_err(CliError::usage)?;
        if stats.is_empty() {
            return Err(CliError::usage(format!("{} has an empty metrics log", d.display())));
        }
        runs.push(
            stats
                .iter()
                .map(|s| serde_json::to_value(s).expect("stats serialize"))
                .collect(),
        );
    }
    let names = labels(run_dirs);
    fs::create_dir_all(out.join("runs"))?;
    fs::create_dir_all(out.join("stats"))?;

    let mut files = ReportFiles {
        runs: Vec::new(),
        stats: Vec::new(),
    };
    for (name, rows) in names.iter().zip(&runs) {
        let path = out.join("runs").join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(BatchStats::FIELDS)?;
        for r in rows {
            w.write_record(BatchStats::FIELDS.iter().map(|f| cell(&r[*f])))?;
        }
        w.flush()?;
        files.runs.push(path);
    }

    let steps: BTreeSet<u64> = runs.iter().flatten().filter_map(|r| r["step"].as_u64()).collect();
    let by_step: Vec<BTreeMap<u64, &Value>> = runs
        .iter()
        .map(|rows| rows.iter().filter_map(|r| r["step"].as_u64().map(|s| (s, r))).collect())
        .collect();
    for field in BatchStats::FIELDS.iter().filter(|f| **f != "step") {
        let path = out.join("stats").join(format!("{field}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(std::iter::once("step").chain(names.iter().map(String::as_str)))?;
        for &s in &steps {
            let mut rec = vec![s.to_string()];
            rec.extend(
                by_step
                    .iter()
                    .map(|m| m.get(&s).map(|r| cell(&r[*field])).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        files.stats.push(path);
    }
    Ok(files)
}
