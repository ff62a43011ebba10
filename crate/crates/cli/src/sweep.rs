//! One training run per value of a single config axis, resumable, with a
//! consolidated CSV.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nclip::evaluation::SimilarityMetric;
use nclip::training::{BatchStats, CollapseKind, RunPaths, RunSummary};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{cmd_eval, cmd_train, load_checkpoint, CONFIG_SNAPSHOT};
use crate::config::{EvalTask, RunConfig};
use crate::error::CliError;

pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Config keys applied over the defaults before the axis value.
    #[serde(default = "empty_object")]
    pub base: Value,
    /// Dotted config path, e.g. `objective.lambda2`.
    pub axis: String,
    pub values: Vec<Value>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub steps: usize,
    pub collapse: CollapseKind,
    pub metric: SimilarityMetric,
    pub zeroshot: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    pub final_stats: Option<BatchStats>,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dir_name(axis: &str, v: &Value) -> String {
    format!("{axis}={}", value_label(v))
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._=-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs (or reuses) every value of the axis under `out`. Every value is
/// validated before the first run starts.
pub fn cmd_sweep(base: &RunConfig, axis: &str, values: &[Value], out: &Path) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::usage("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| base.with_override(axis, v.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (v, cfg) in values.iter().zip(configs) {
        let dir = out.join(dir_name(axis, v));
        let paths = RunPaths::new(&dir);
        let mut expected = cfg.clone();
        expected.out_dir = dir.clone();
        let done = paths.summary().is_file() && paths.model().is_file();
        let (summary, status) = if done {
            let existing = RunConfig::load(&dir.join(CONFIG_SNAPSHOT))?;
            if existing != expected {
                return Err(CliError::usage(format!(
                    "{} holds a run with a different config",
                    dir.display()
                )));
            }
            let text = fs::read_to_string(paths.summary())?;
            let summary: RunSummary = serde_json::from_str(&text)
                .map_err(|e| CliError::runtime(format!("{}: {e}", paths.summary().display())))?;
            info!("{axis}={}: already complete, skipping", value_label(v));
            (summary, RunStatus::Skipped)
        } else {
            info!("{axis}={}: training", value_label(v));
            (cmd_train(&cfg, &dir, None)?, RunStatus::Ran)
        };
        let model = load_checkpoint(&paths.model())?;
        let metric = if cfg.objective.kind.trains_clip_head() {
            SimilarityMetric::Cosine
        } else {
            SimilarityMetric::NegCe
        };
        let mut eval_cfg = cfg.clone();
        eval_cfg.eval.recall_ks = vec![1];
        let report = cmd_eval(
            &eval_cfg,
            &model,
            None,
            &[EvalTask::Zeroshot, EvalTask::Retrieval],
            metric,
        )?;
        rows.push(SweepRow {
            value: value_label(v),
            run_dir: dir,
            status,
            steps: summary.steps,
            collapse: summary.collapse,
            metric,
            zeroshot: report.values["zeroshot.accuracy"],
            r1_i2t: report.values["retrieval.image_to_text.r@1"],
            r1_t2i: report.values["retrieval.text_to_image.r@1"],
            final_stats: summary.final_stats,
        });
    }
    write_csv(&out.join(SWEEP_CSV), axis, &rows)?;
    Ok(rows)
}

fn write_csv(path: &Path, axis: &str, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let fixed = [
        "axis", "value", "run_dir", "status", "steps", "collapse", "metric", "zeroshot", "r1_i2t", "r1_t2i",
    ];
    let header: Vec<String> = fixed
        .iter()
        .map(|s| s.to_string())
        .chain(BatchStats::FIELDS.iter().map(|f| format!("final_{f}")))
        .collect();
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            axis.to_string(),
            r.value.clone(),
            r.run_dir.display().to_string(),
            tag(&r.status),
            r.steps.to_string(),
            tag(&r.collapse),
            tag(&r.metric),
            r.zeroshot.to_string(),
            r.r1_i2t.to_string(),
            r.r1_t2i.to_string(),
        ];
        let stats = r
            .final_stats
            .as_ref()
            .map(|s| serde_json::to_value(s).expect("stats serialize"));
        for f in BatchStats::FIELDS {
            rec.push(stats.as_ref().map(|s| crate::report::cell(&s[f])).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Serialized snake_case name of a unit enum variant.
fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}
