//! Run configuration: one JSON document with a section per module.
//!
//! User files are merged over the defaults before deserialization, so a file
//! may set any subset of keys while unknown keys are still rejected.

use std::fs;
use std::path::{Path, PathBuf};

use nclip::data::{generate_heldout, generate_synthetic, load_dataset, ConceptWorld, PairDataset};
use nclip::evaluation::{ProbeOptions, SimilarityMetric};
use nclip::model::{EncoderConfig, HeadConfig, ModelConfig};
use nclip::training::{AdamWConfig, ObjectiveConfig, ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum EvalTask {
    Zeroshot,
    Retrieval,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub debiased_sampling: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            batch_size: 64,
            debiased_sampling: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tasks: Vec<EvalTask>,
    pub metric: SimilarityMetric,
    /// Symmetrized neg-CE similarity.
    pub symmetric: bool,
    pub heldout_pairs: usize,
    pub recall_ks: Vec<usize>,
    /// Training pairs used to fit the linear probe.
    pub probe_train_pairs: usize,
    pub probe: ProbeOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec![EvalTask::Zeroshot, EvalTask::Retrieval],
            metric: SimilarityMetric::Cosine,
            symmetric: true,
            heldout_pairs: 512,
            recall_ks: vec![1, 5, 10],
            probe_train_pairs: 2048,
            probe: ProbeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization and shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Training pairs file; `None` generates them from `world`.
    pub dataset: Option<PathBuf>,
    pub world: ConceptWorld,
    pub encoder: EncoderConfig,
    pub clip_head: HeadConfig,
    pub nclip_head: HeadConfig,
    pub share_heads: bool,
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: None,
            world: ConceptWorld::default(),
            encoder: model.encoder,
            clip_head: model.clip_head,
            nclip_head: model.nclip_head,
            share_heads: model.share_heads,
            objective: ObjectiveConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Overwrites `base` with every key of `patch`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a `--set` / sweep value: JSON when it parses, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_value(patch: Value) -> Result<Self, CliError> {
        if !patch.is_object() {
            return Err(CliError::usage("config must be a JSON object"));
        }
        let mut v = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        merge(&mut v, patch);
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate().map_err(CliError::usage)?;
        self.train_config().validate().map_err(CliError::usage)?;
        let e = &self.eval;
        if e.heldout_pairs < 2 {
            return Err(CliError::usage("eval.heldout_pairs must be at least 2"));
        }
        if e.recall_ks.iter().any(|&k| k == 0 || k > e.heldout_pairs) {
            return Err(CliError::usage(format!(
                "eval.recall_ks must lie in [1, {}]",
                e.heldout_pairs
            )));
        }
        Ok(())
    }

    /// Sets the value at a dotted path such as `objective.lambda2`. The path
    /// must name an existing field.
    pub fn with_override(&self, path: &str, value: Value) -> Result<Self, CliError> {
        self.with_overrides(&[(path.to_string(), value)])
    }

    /// Applies every override, then validates once.
    pub fn with_overrides(&self, sets: &[(String, Value)]) -> Result<Self, CliError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (path, value) in sets {
            *resolve_mut(&mut v, path)? = value.clone();
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            clip_head: self.clip_head.clone(),
            nclip_head: self.nclip_head.clone(),
            share_heads: self.share_heads,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            objective: self.objective.clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            batch_size: self.training.batch_size,
            seed: self.seed,
            debiased_sampling: self.training.debiased_sampling,
        }
    }

    pub fn training_pairs(&self) -> Result<PairDataset, CliError> {
        match &self.dataset {
            Some(p) => load_dataset(p).map_err(CliError::usage),
            None => Ok(generate_synthetic(&self.world, self.seed)?),
        }
    }

    pub fn heldout_pairs(&self) -> Result<PairDataset, CliError> {
        Ok(generate_heldout(&self.world, self.seed, self.eval.heldout_pairs)?)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// The leaf at `path`, which must already exist.
pub fn resolve_mut<'a>(v: &'a mut Value, path: &str) -> Result<&'a mut Value, CliError> {
    let mut cur = v;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| CliError::usage(format!("'{path}' does not name a config field")))?;
    }
    Ok(cur)
}
