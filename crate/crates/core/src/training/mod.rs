//! Deterministic training: AdamW under a warm-up + cosine schedule, with the
//! collapse monitor logged every step.
//!
//! A run directory holds
//!
//! ```text
//! metrics.jsonl             one BatchStats object per step
//! checkpoints/epoch-NNNN.json   full training state after each epoch
//! model.json                final model checkpoint
//! summary.json              RunSummary
//! diagnostics.json          only written when a step produced a non-finite loss
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{batches, PairDataset};
use crate::error::{Error, Result};
use crate::evaluation::{cosine_similarity, neg_ce_similarity};
use crate::matrix::Matrix;
use crate::model::{DualEncoder, ForwardOutput, Mode, ModelCheckpoint, ModelConfig, TrainedHeads};
use crate::numerics::{softmax_rows, ProbMatrix};
use crate::objectives::{
    clip_loss, nclip_loss, shared_latent_loss, unified_loss, xclip_loss, LossOutput, MixWeights, RegularizerWeights,
    TargetTransform, Temperature, TransformKindName,
};

mod optim;
mod stats;

pub use optim::{adamw_step, adamw_update, lr_at, AdamWConfig, OptimizerState, ScheduleConfig};
pub use stats::{argmax, column_std, compute_batch_stats, row_std, BatchStats};

pub const STATE_FORMAT: &str = "nclip-train-state";
pub const STATE_VERSION: u32 = 1;
/// Final `row_std` below this marks constant-uniform collapse.
pub const UNIFORM_COLLAPSE_ROW_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Clip,
    Nclip,
    Xclip,
    Unified,
    SharedLatent,
}

impl ObjectiveKind {
    pub fn trains_clip_head(self) -> bool {
        matches!(self, ObjectiveKind::Clip | ObjectiveKind::Xclip)
    }

    pub fn trains_nclip_head(self) -> bool {
        self != ObjectiveKind::Clip
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_clip: f64,
    pub lambda_nclip: f64,
    /// Linear ramp of `lambda_nclip` from 0 over this many epochs (xclip only).
    pub nclip_warmup_epochs: usize,
    /// Target transform of the unified objective.
    pub transform: TransformKindName,
    /// τ_s; `None` picks the transform's preset.
    pub target_temperature: Option<f64>,
    pub prediction_temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Xclip,
            lambda1: 0.5,
            lambda2: 1.5,
            lambda_clip: 0.2,
            lambda_nclip: 1.0,
            nclip_warmup_epochs: 0,
            transform: TransformKindName::Sinkhorn,
            target_temperature: None,
            prediction_temperature: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn weights(&self) -> Result<RegularizerWeights> {
        RegularizerWeights::new(self.lambda1, self.lambda2).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mix(&self) -> Result<MixWeights> {
        MixWeights::new(self.lambda_clip, self.lambda_nclip).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn target_transform(&self, k: usize) -> Result<TargetTransform> {
        let ts = self.target_temperature.unwrap_or(match self.transform {
            TransformKindName::Identity => self.prediction_temperature,
            TransformKindName::Sinkhorn => 0.25,
            TransformKindName::BatchSoftmax => 0.5,
            TransformKindName::Centering => 0.7,
        });
        TargetTransform::from_name(self.transform, k, ts, self.prediction_temperature)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.weights()?;
        if self.kind == ObjectiveKind::Xclip {
            self.mix()?;
        }
        if !(self.prediction_temperature > 0.0 && self.prediction_temperature.is_finite()) {
            return Err(Error::Config("prediction_temperature must be positive".into()));
        }
        self.target_transform(2).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw every batch from a single source tag.
    pub debiased_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 64,
            seed: 0,
            debiased_sampling: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        self.model.validate()?;
        self.objective.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()
    }
}

/// Objective bound to its mutable state (centering statistics).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub config: ObjectiveConfig,
    pub transform: Option<TargetTransform>,
}

/// Loss with gradients for `[g_img, g_txt, h_img, h_txt]` plus what the
/// monitor needs.
pub struct Evaluated {
    pub loss: LossOutput,
    pub uses_temperature: bool,
    pub p_img: ProbMatrix,
    pub p_txt: ProbMatrix,
    pub sim: Matrix,
    pub l_clip: Option<f64>,
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

impl Objective {
    pub fn new(config: &ObjectiveConfig, k: usize) -> Result<Self> {
        config.validate()?;
        let transform = match config.kind {
            ObjectiveKind::Unified => Some(config.target_transform(k)?),
            _ => None,
        };
        Ok(Self {
            config: config.clone(),
            transform,
        })
    }

    /// `nclip_scale` multiplies `lambda_nclip` (warm-up).
    pub fn evaluate(&mut self, fwd: &ForwardOutput, temp: Temperature, nclip_scale: f64) -> Result<Evaluated> {
        let (gi, gt, hi, ht) = (&fwd.img.g, &fwd.txt.g, &fwd.img.h, &fwd.txt.h);
        let w = self.config.weights()?;
        let kind = self.config.kind;
        let pt = match kind {
            ObjectiveKind::Unified => self.config.prediction_temperature,
            _ => 1.0,
        };
        let p_img = softmax_rows(hi, pt)?;
        let p_txt = softmax_rows(ht, pt)?;
        let (mut loss, uses_temperature) = match kind {
            ObjectiveKind::Clip => (clip_loss(gi, gt, temp)?, true),
            ObjectiveKind::Nclip => (nclip_loss(hi, ht, w)?, false),
            ObjectiveKind::Xclip => {
                let mix = MixWeights {
                    lambda_clip: self.config.lambda_clip,
                    lambda_nclip: self.config.lambda_nclip * nclip_scale,
                };
                (xclip_loss(gi, gt, hi, ht, temp, w, mix)?, true)
            }
            ObjectiveKind::Unified => {
                let tt = self.transform.as_mut().expect("unified objective carries a transform");
                (unified_loss(hi, ht, tt, w)?, false)
            }
            ObjectiveKind::SharedLatent => (shared_latent_loss(hi, ht, temp, w)?, true),
        };
        let grads = std::mem::take(&mut loss.grads);
        loss.grads = match kind {
            ObjectiveKind::Clip => {
                let mut g = grads;
                g.push(zeros_like(hi));
                g.push(zeros_like(ht));
                g
            }
            ObjectiveKind::Xclip => grads,
            _ => {
                let mut g = vec![zeros_like(gi), zeros_like(gt)];
                g.extend(grads);
                g
            }
        };
        let (sim, l_clip) = match kind {
            ObjectiveKind::Clip => (cosine_similarity(gi, gt)?, Some(loss.value)),
            ObjectiveKind::Xclip => (cosine_similarity(gi, gt)?, loss.component("clip")),
            _ => (neg_ce_similarity(&p_img, &p_txt, true)?, None),
        };
        Ok(Evaluated {
            loss,
            uses_temperature,
            p_img,
            p_txt,
            sim,
            l_clip,
        })
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub format: String,
    pub version: u32,
    pub model: ModelCheckpoint,
    pub optimizer: OptimizerState,
    pub objective: Objective,
    /// Steps completed.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
}

impl TrainState {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let st: TrainState = serde_json::from_str(&text)?;
        if st.format != STATE_FORMAT {
            return Err(Error::Format(format!("not a training state (format '{}')", st.format)));
        }
        if st.version != STATE_VERSION {
            return Err(Error::Version {
                found: st.version,
                expected: STATE_VERSION,
            });
        }
        Ok(st)
    }
}

/// Loads a model from either a model checkpoint or a training state file.
pub fn load_model(path: impl AsRef<Path>) -> Result<DualEncoder> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(STATE_FORMAT) => DualEncoder::from_checkpoint(TrainState::load(path)?.model),
        _ => DualEncoder::from_checkpoint(serde_json::from_value(value)?),
    }
}

/// In-memory training driver.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DualEncoder,
    pub optimizer: OptimizerState,
    pub objective: Objective,
    pub schedule: ScheduleConfig,
    pub step: usize,
    pub epoch: usize,
    decay: Vec<bool>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, ds: &PairDataset) -> Result<Self> {
        config.validate()?;
        let enc = &config.model.encoder;
        if ds.images.cols() != enc.img_input_dim || ds.texts.cols() != enc.txt_input_dim {
            return Err(Error::Config(format!(
                "dataset dims ({}, {}) do not match encoder input dims ({}, {})",
                ds.images.cols(),
                ds.texts.cols(),
                enc.img_input_dim,
                enc.txt_input_dim
            )));
        }
        if ds.len() < config.batch_size {
            return Err(Error::Config(format!(
                "dataset has {} pairs, fewer than batch_size {}",
                ds.len(),
                config.batch_size
            )));
        }
        let available = batches(ds, config.batch_size, config.seed, 0, config.debiased_sampling)?
            .batches
            .len();
        let mut schedule = config.schedule.clone();
        if schedule.steps_per_epoch == 0 {
            schedule.steps_per_epoch = available;
        } else if schedule.steps_per_epoch > available {
            return Err(Error::Config(format!(
                "steps_per_epoch {} exceeds the {available} batches per epoch",
                schedule.steps_per_epoch
            )));
        }
        if schedule.steps_per_epoch == 0 {
            return Err(Error::Config("no full batch available in an epoch".into()));
        }
        let mut model = DualEncoder::init(&config.model, config.seed)?;
        model.set_trained_heads(TrainedHeads {
            clip: config.objective.kind.trains_clip_head(),
            nclip: config.objective.kind.trains_nclip_head(),
        });
        let objective = Objective::new(&config.objective, config.model.nclip_head.output_dim)?;
        Ok(Self {
            config: config.clone(),
            optimizer: OptimizerState::new(model.params()),
            decay: model.param_info().iter().map(|p| p.decay).collect(),
            model,
            objective,
            schedule,
            step: 0,
            epoch: 0,
        })
    }

    pub fn restore(&mut self, state: TrainState) -> Result<()> {
        if state.model.config != self.config.model || state.objective.config != self.config.objective {
            return Err(Error::Config(
                "training state was produced with a different config".into(),
            ));
        }
        self.model = DualEncoder::from_checkpoint(state.model)?;
        self.optimizer = state.optimizer;
        self.objective = state.objective;
        self.step = state.step;
        self.epoch = state.epoch;
        Ok(())
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            model: self.model.to_checkpoint(),
            optimizer: self.optimizer.clone(),
            objective: self.objective.clone(),
            step: self.step,
            epoch: self.epoch,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.schedule.total_epochs
    }

    fn nclip_scale(&self) -> f64 {
        let warm = self.config.objective.nclip_warmup_epochs * self.schedule.steps_per_epoch;
        if warm == 0 {
            1.0
        } else {
            (self.step as f64 / warm as f64).min(1.0)
        }
    }

    /// One optimization step on the given batch.
    pub fn train_step(&mut self, img: &Matrix, txt: &Matrix) -> Result<BatchStats> {
        let lr = lr_at(&self.schedule, (self.step + 1).min(self.schedule.total_steps()))?;
        let temp = self.model.temperature();
        let fwd = self.model.forward_batch(img, txt, Mode::Train)?;
        if ![&fwd.img.g, &fwd.txt.g, &fwd.img.h, &fwd.txt.h]
            .iter()
            .all(|m| m.is_finite())
        {
            let stats = BatchStats {
                step: self.step,
                epoch: self.epoch,
                loss: f64::NAN,
                lr,
                sigma: temp.value(),
                ..BatchStats::default()
            };
            return Err(Error::NonFinite {
                step: self.step,
                detail: serde_json::to_string(&stats)?,
            });
        }
        let ev = self.objective.evaluate(&fwd, temp, self.nclip_scale())?;
        let mut stats = compute_batch_stats(&ev.p_img, &ev.p_txt, &ev.sim, ev.l_clip);
        stats.step = self.step;
        stats.epoch = self.epoch;
        stats.loss = ev.loss.value;
        stats.lr = lr;
        stats.sigma = temp.value();
        let finite =
            ev.loss.value.is_finite() && ev.loss.temp_grad.is_finite() && ev.loss.grads.iter().all(Matrix::is_finite);
        if !finite {
            return Err(Error::NonFinite {
                step: self.step,
                detail: serde_json::to_string(&stats)?,
            });
        }
        let g = &ev.loss.grads;
        let mut grads = self.model.backward_batch(&fwd.cache, &g[0], &g[1], &g[2], &g[3])?;
        if ev.uses_temperature {
            grads[self.model.temperature_index()] = Matrix::filled(1, 1, ev.loss.temp_grad);
        }
        self.model.update_running_stats(&fwd.cache)?;
        adamw_update(
            &self.config.optimizer,
            &mut self.optimizer,
            self.model.params_mut(),
            &grads,
            lr,
            &self.decay,
        )?;
        self.model.clamp_temperature();
        self.step += 1;
        Ok(stats)
    }

    /// Runs the next epoch, handing every step's stats to `sink` in order.
    pub fn run_epoch(&mut self, ds: &PairDataset, mut sink: impl FnMut(&BatchStats) -> Result<()>) -> Result<()> {
        let plan = batches(
            ds,
            self.config.batch_size,
            self.config.seed,
            self.epoch as u64,
            self.config.debiased_sampling,
        )?;
        for idx in plan.batches.iter().take(self.schedule.steps_per_epoch) {
            let stats = self.train_step(&ds.images.select_rows(idx), &ds.texts.select_rows(idx))?;
            sink(&stats)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseKind {
    None,
    /// Every sample maps to the same uniform distribution.
    ConstantUniform,
    /// Samples use only a small fraction of the clusters.
    Dimensional,
}

/// Classifies the final step's statistics.
pub fn collapse_verdict(stats: &BatchStats, k: usize) -> CollapseKind {
    if stats.row_std < UNIFORM_COLLAPSE_ROW_STD {
        CollapseKind::ConstantUniform
    } else if stats.l_he.exp() < 0.1 * k as f64 {
        CollapseKind::Dimensional
    } else {
        CollapseKind::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_stats: Option<BatchStats>,
    pub collapse: CollapseKind,
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epoch:04}.json"))
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.dir.join("diagnostics.json")
    }

    /// Most recent epoch checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let mut entries: Vec<PathBuf> = fs::read_dir(self.checkpoints())
            .ok()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        entries.pop()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Keeps only metric lines of steps before `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let s: BatchStats = serde_json::from_str(&line)?;
        if s.step < step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains to completion, writing metrics and checkpoints under `dir`.
/// With `resume`, continues from a training-state checkpoint and appends to
/// the existing metrics log.
pub fn train(config: &TrainConfig, ds: &PairDataset, dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let paths = RunPaths::new(dir);
    let mut trainer = Trainer::new(config, ds)?;
    fs::create_dir_all(paths.checkpoints()).map_err(|e| Error::io(paths.checkpoints(), e))?;
    if let Some(ck) = resume {
        trainer.restore(TrainState::load(ck)?)?;
        truncate_metrics(&paths.metrics(), trainer.step)?;
        info!("resuming at step {} (epoch {})", trainer.step, trainer.epoch);
    } else {
        let _ = fs::remove_file(paths.diagnostics());
    }
    let metrics_path = paths.metrics();
    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    let mut last = None;
    while !trainer.finished() {
        let res = trainer.run_epoch(ds, |s| {
            let line = serde_json::to_string(s)?;
            writeln!(out, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(s.clone());
            Ok(())
        });
        out.flush().map_err(|e| Error::io(&metrics_path, e))?;
        if let Err(e) = res {
            if let Error::NonFinite { detail, step } = &e {
                let dump: serde_json::Value = serde_json::from_str(detail).unwrap_or(serde_json::Value::Null);
                write_json(
                    &paths.diagnostics(),
                    &serde_json::json!({ "step": step, "stats": dump }),
                )?;
            }
            return Err(e);
        }
        write_json(&paths.checkpoint(trainer.epoch), &trainer.state())?;
        info!("epoch {} done at step {}", trainer.epoch, trainer.step);
    }
    if last.is_none() {
        last = read_last_stats(&metrics_path)?;
    }
    trainer.model.save(paths.model())?;
    let summary = RunSummary {
        steps: trainer.step,
        epochs: trainer.epoch,
        collapse: last.as_ref().map_or(CollapseKind::None, |s| {
            collapse_verdict(s, config.model.nclip_head.output_dim)
        }),
        final_stats: last,
    };
    write_json(&paths.summary(), &summary)?;
    Ok(summary)
}

fn read_last_stats(path: &Path) -> Result<Option<BatchStats>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => return Ok(None),
    };
    text.lines()
        .last()
        .map(serde_json::from_str)
        .transpose()
        .map_err(Into::into)
}

/// Parses a metrics log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<BatchStats>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
