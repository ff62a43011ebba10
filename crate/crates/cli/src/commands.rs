use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nclip::data::{generate_heldout, generate_synthetic, load_dataset, save_dataset, PairDataset};
use nclip::evaluation::{linear_probe, retrieval_recall, zeroshot_classify, EvalReport, SimilarityMetric};
use nclip::model::{DualEncoder, Modality, Mode};
use nclip::training::{load_model, train, RunSummary};

use crate::config::{EvalTask, RunConfig};
use crate::error::CliError;

pub const CONFIG_SNAPSHOT: &str = "config.json";

/// Writes the training pairs (or `heldout` held-out pairs) of the configured
/// world. Returns the number of pairs written.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, heldout: Option<usize>) -> Result<usize, CliError> {
    let ds = match heldout {
        Some(n) => generate_heldout(&cfg.world, cfg.seed, n),
        None => generate_synthetic(&cfg.world, cfg.seed),
    }
    .map_err(CliError::usage)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_dataset(&ds, out)?;
    Ok(ds.len())
}

/// Trains into `out`, writing the resolved config next to the run artifacts
/// so that replaying it reproduces the metrics log.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary, CliError> {
    if let Some(ck) = resume {
        if !ck.is_file() {
            return Err(CliError::usage(format!("resume checkpoint {} not found", ck.display())));
        }
    }
    let ds = cfg.training_pairs()?;
    fs::create_dir_all(out)?;
    let mut snapshot = cfg.clone();
    snapshot.out_dir = out.to_path_buf();
    fs::write(out.join(CONFIG_SNAPSHOT), snapshot.to_pretty_json() + "\n")?;
    let summary = train(&cfg.train_config(), &ds, out, resume).map_err(|e| match e {
        nclip::Error::Config(_) | nclip::Error::Version { .. } | nclip::Error::Format(_) => CliError::usage(e),
        other => CliError::runtime(other),
    })?;
    Ok(summary)
}

/// The config snapshot of the run a checkpoint belongs to, if any.
pub fn find_run_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(CONFIG_SNAPSHOT))
        .find(|p| p.is_file())
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoder, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} not found", path.display())));
    }
    load_model(path).map_err(|e| CliError::usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// Warnings for scoring with a head the checkpoint's objective never trained.
pub fn head_warnings(model: &DualEncoder, metric: SimilarityMetric) -> Vec<String> {
    let Some(heads) = model.trained_heads() else {
        return Vec::new();
    };
    match metric {
        SimilarityMetric::NegCe if !heads.nclip => {
            vec!["metric neg_ce reads the nclip head, which this checkpoint's objective did not train".into()]
        }
        SimilarityMetric::Cosine if !heads.clip => {
            vec!["metric cosine reads the clip head, which this checkpoint's objective did not train".into()]
        }
        _ => Vec::new(),
    }
}

/// Evaluates `model` on the configured held-out set (or `pairs` when given).
pub fn cmd_eval(
    cfg: &RunConfig,
    model: &DualEncoder,
    pairs: Option<&PairDataset>,
    tasks: &[EvalTask],
    metric: SimilarityMetric,
) -> Result<EvalReport, CliError> {
    if tasks.is_empty() {
        return Err(CliError::usage("no evaluation task selected"));
    }
    let generated;
    let held = match pairs {
        Some(p) => p,
        None => {
            generated = cfg.heldout_pairs()?;
            &generated
        }
    };
    let e = &cfg.eval;
    let shape_err = |err: nclip::Error| CliError::usage(format!("checkpoint does not fit the evaluation data: {err}"));
    let mut values = BTreeMap::new();
    let mut warnings = Vec::new();
    for &task in tasks {
        match task {
            EvalTask::Zeroshot => {
                let class_texts = cfg.world.prototypes(cfg.seed).text;
                let labels: Vec<usize> = held.labels.iter().map(|&l| l as usize).collect();
                let acc = zeroshot_classify(model, &class_texts, &held.images, &labels, metric, e.symmetric)
                    .map_err(shape_err)?;
                values.insert("zeroshot.accuracy".to_string(), acc);
                values.insert("zeroshot.chance".to_string(), 1.0 / cfg.world.num_concepts as f64);
            }
            EvalTask::Retrieval => {
                for r in retrieval_recall(model, held, &e.recall_ks, metric, e.symmetric).map_err(shape_err)? {
                    values.insert(format!("retrieval.image_to_text.r@{}", r.k), r.image_to_text);
                    values.insert(format!("retrieval.text_to_image.r@{}", r.k), r.text_to_image);
                }
            }
            EvalTask::Probe => {
                let train = cfg.training_pairs()?;
                let n = e.probe_train_pairs.min(train.len());
                let idx: Vec<usize> = (0..n).collect();
                let features = |x: &nclip::Matrix| {
                    model
                        .encode(Modality::Image, x, Mode::Eval)
                        .map(|enc| enc.f)
                        .map_err(shape_err)
                };
                let fit_x = features(&train.images.select_rows(&idx))?;
                let fit_y: Vec<usize> = idx.iter().map(|&i| train.labels[i] as usize).collect();
                let test_x = features(&held.images)?;
                let test_y: Vec<usize> = held.labels.iter().map(|&l| l as usize).collect();
                let res = linear_probe(&fit_x, &fit_y, &test_x, &test_y, &e.probe)?;
                values.insert("probe.accuracy".to_string(), res.best_accuracy);
                values.insert("probe.lr".to_string(), res.best_lr);
            }
        }
    }
    if tasks.iter().any(|t| *t != EvalTask::Probe) {
        warnings = head_warnings(model, metric);
        for w in &warnings {
            warn!("{w}");
        }
    }
    let task = tasks
        .iter()
        .map(|t| {
            serde_json::to_value(t)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(",");
    Ok(EvalReport {
        task,
        metric: Some(metric),
        values,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        warnings,
    })
}

pub fn load_pairs(path: &Path) -> Result<PairDataset, CliError> {
    load_dataset(path).map_err(|e| CliError::usage(format!("cannot load dataset {}: {e}", path.display())))
}
