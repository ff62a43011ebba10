//! Desk-scale dual encoder: one MLP trunk per modality, a contrastive head
//! producing `g` and a non-contrastive head producing the logits `h`.
//!
//! Per modality the computation is
//!
//! ```text
//! x ─ trunk ─ f ─ stem ─┬─ clip head ─ g
//!                       └─ nclip head ─ h
//! ```
//!
//! where the stem holds the hidden layers the two heads share (zero by
//! default). Forward passes are pure; batch-standardization running
//! statistics are folded in afterwards with [`DualEncoder::update_running_stats`].

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::Temperature;
use crate::rng;

mod layers;

pub use layers::{BatchStandardizeState, Mode, BN_EPSILON, BN_MOMENTUM};
use layers::{Stage, StageCache};

pub const CHECKPOINT_FORMAT: &str = "nclip-model";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INITIAL_TEMPERATURE: f64 = 0.07;
const INIT_STREAM: u64 = 10;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub img_input_dim: usize,
    pub txt_input_dim: usize,
    /// Output width of each trunk layer; the last one is the feature width.
    pub widths: Vec<usize>,
    pub shared_trunk: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            img_input_dim: 32,
            txt_input_dim: 32,
            widths: vec![64, 64],
            shared_trunk: false,
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    LinearNobias,
    MlpBn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Vanilla,
    Bottleneck,
    L2norm,
    NoLastBn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub variant: HeadVariant,
    /// Leading hidden layers shared with the other head of the same modality.
    /// Only meaningful on the non-contrastive head.
    pub shared_hidden_layers: usize,
    pub total_hidden_layers: usize,
}

impl HeadConfig {
    pub fn clip_default() -> Self {
        Self {
            kind: HeadKind::LinearNobias,
            hidden_dim: 128,
            output_dim: 32,
            variant: HeadVariant::Vanilla,
            shared_hidden_layers: 0,
            total_hidden_layers: 0,
        }
    }

    pub fn nclip_default() -> Self {
        Self {
            kind: HeadKind::MlpBn,
            hidden_dim: 128,
            output_dim: 256,
            variant: HeadVariant::Vanilla,
            shared_hidden_layers: 0,
            total_hidden_layers: 1,
        }
    }

    /// Width of the bottleneck layer.
    pub fn bottleneck_dim(&self) -> usize {
        (self.output_dim / 128).max(8)
    }

    fn validate(&self, which: &str) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{which} head: {m}")));
        if self.output_dim == 0 {
            return fail("output_dim must be positive".into());
        }
        if self.shared_hidden_layers > self.total_hidden_layers {
            return fail(format!(
                "shared_hidden_layers {} exceeds total_hidden_layers {}",
                self.shared_hidden_layers, self.total_hidden_layers
            ));
        }
        match self.kind {
            HeadKind::LinearNobias => {
                if self.total_hidden_layers != 0 || self.variant != HeadVariant::Vanilla {
                    return fail("linear_nobias takes no hidden layers and only the vanilla variant".into());
                }
            }
            HeadKind::MlpBn => {
                if self.output_dim < 2 {
                    return fail("mlp_bn output_dim must be at least 2".into());
                }
                if self.total_hidden_layers > 0 && self.hidden_dim == 0 {
                    return fail("hidden_dim must be positive".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub clip_head: HeadConfig,
    pub nclip_head: HeadConfig,
    /// Use one set of head weights for both modalities.
    pub share_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            clip_head: HeadConfig::clip_default(),
            nclip_head: HeadConfig::nclip_default(),
            share_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if e.widths.contains(&0) || e.img_input_dim == 0 || e.txt_input_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if e.shared_trunk && e.img_input_dim != e.txt_input_dim {
            return Err(Error::Config(format!(
                "shared trunk needs equal input dims, got {} and {}",
                e.img_input_dim, e.txt_input_dim
            )));
        }
        self.clip_head.validate("clip")?;
        self.nclip_head.validate("nclip")?;
        if self.clip_head.shared_hidden_layers != 0 {
            return Err(Error::Config(
                "shared hidden layers are configured on the nclip head".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    /// Subject to weight decay (linear weights only).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal { fan_in: usize },
    Zeros,
    Ones,
    LogTemperature,
}

#[derive(Default)]
struct Builder {
    specs: Vec<(ParamInfo, usize, usize, Init)>,
    stats: Vec<usize>,
}

impl Builder {
    fn param(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        self.specs.push((ParamInfo { name, decay }, rows, cols, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Stage {
        let w = self.param(format!("{name}.w"), d_in, d_out, Init::Normal { fan_in: d_in }, true);
        let b = bias.then(|| self.param(format!("{name}.b"), 1, d_out, Init::Zeros, false));
        Stage::Linear { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize, affine: bool) -> Stage {
        let affine = affine.then(|| {
            (
                self.param(format!("{name}.gamma"), 1, dim, Init::Ones, false),
                self.param(format!("{name}.beta"), 1, dim, Init::Zeros, false),
            )
        });
        self.stats.push(dim);
        Stage::Norm {
            affine,
            stats: self.stats.len() - 1,
        }
    }

    fn hidden(&mut self, name: &str, d_in: usize, d_out: usize) -> Vec<Stage> {
        vec![
            self.linear(&format!("{name}.linear"), d_in, d_out, false),
            self.norm(&format!("{name}.bn"), d_out, true),
            Stage::Gelu,
        ]
    }

    fn trunk(&mut self, prefix: &str, d_in: usize, widths: &[usize]) -> Vec<Stage> {
        let mut stages = Vec::new();
        let mut d = d_in;
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 {
                stages.push(Stage::Gelu);
            }
            stages.push(self.linear(&format!("{prefix}.trunk.{i}"), d, w, true));
            d = w;
        }
        stages
    }

    /// Head layers after the `skip` hidden layers already built into the stem.
    fn head(&mut self, prefix: &str, d_in: usize, cfg: &HeadConfig, skip: usize) -> Vec<Stage> {
        match cfg.kind {
            HeadKind::LinearNobias => vec![self.linear(&format!("{prefix}.out"), d_in, cfg.output_dim, false)],
            HeadKind::MlpBn => {
                let mut stages = Vec::new();
                let mut d = d_in;
                for i in skip..cfg.total_hidden_layers {
                    stages.extend(self.hidden(&format!("{prefix}.hidden.{i}"), d, cfg.hidden_dim));
                    d = cfg.hidden_dim;
                }
                match cfg.variant {
                    HeadVariant::Bottleneck => {
                        let bn = cfg.bottleneck_dim();
                        stages.push(self.linear(&format!("{prefix}.bottleneck"), d, bn, false));
                        d = bn;
                    }
                    HeadVariant::L2norm => stages.push(Stage::L2Norm),
                    HeadVariant::Vanilla | HeadVariant::NoLastBn => {}
                }
                stages.push(self.linear(&format!("{prefix}.out"), d, cfg.output_dim, false));
                if cfg.variant != HeadVariant::NoLastBn {
                    stages.push(self.norm(&format!("{prefix}.out_bn"), cfg.output_dim, false));
                }
                stages
            }
        }
    }

    fn heads(&mut self, prefix: &str, d_in: usize, cfg: &ModelConfig) -> (Vec<Stage>, Vec<Stage>, Vec<Stage>) {
        let shared = cfg.nclip_head.shared_hidden_layers;
        let mut stem = Vec::new();
        let mut d = d_in;
        for i in 0..shared {
            stem.extend(self.hidden(&format!("{prefix}.stem.{i}"), d, cfg.nclip_head.hidden_dim));
            d = cfg.nclip_head.hidden_dim;
        }
        let clip = self.head(&format!("{prefix}.clip"), d, &cfg.clip_head, 0);
        let nclip = self.head(&format!("{prefix}.nclip"), d, &cfg.nclip_head, shared);
        (stem, clip, nclip)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Tower {
    trunk: Vec<Stage>,
    stem: Vec<Stage>,
    clip: Vec<Stage>,
    nclip: Vec<Stage>,
}

struct Layout {
    towers: [Tower; 2],
    specs: Vec<(ParamInfo, usize, usize, Init)>,
    stats: Vec<usize>,
    temperature: usize,
}

fn layout(cfg: &ModelConfig) -> Result<Layout> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let mut b = Builder::default();
    let trunk_img = b.trunk(
        if enc.shared_trunk { "shared" } else { "img" },
        enc.img_input_dim,
        &enc.widths,
    );
    let trunk_txt = if enc.shared_trunk {
        trunk_img.clone()
    } else {
        b.trunk("txt", enc.txt_input_dim, &enc.widths)
    };
    let d = enc.feature_dim();
    let heads_img = b.heads(if cfg.share_heads { "shared" } else { "img" }, d, cfg);
    let heads_txt = if cfg.share_heads {
        heads_img.clone()
    } else {
        b.heads("txt", d, cfg)
    };
    let temperature = b.param("log_temperature".into(), 1, 1, Init::LogTemperature, false);
    let tower = |trunk, (stem, clip, nclip)| Tower {
        trunk,
        stem,
        clip,
        nclip,
    };
    Ok(Layout {
        towers: [tower(trunk_img, heads_img), tower(trunk_txt, heads_txt)],
        specs: b.specs,
        stats: b.stats,
        temperature,
    })
}

/// Backbone features and both head outputs of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub f: Matrix,
    pub g: Matrix,
    pub h: Matrix,
}

#[derive(Clone, Debug)]
struct TowerCache {
    trunk: Vec<StageCache>,
    stem: Vec<StageCache>,
    clip: Vec<StageCache>,
    nclip: Vec<StageCache>,
}

/// Intermediates of one [`DualEncoder::forward_batch`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    mode: Mode,
    towers: [TowerCache; 2],
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub img: Encoded,
    pub txt: Encoded,
    pub cache: ForwardCache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Serialized form of a [`DualEncoder`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub running: Vec<BatchStandardizeState>,
    #[serde(default)]
    pub trained_heads: Option<TrainedHeads>,
}

/// Which heads an objective has optimized; `None` on a fresh model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedHeads {
    pub clip: bool,
    pub nclip: bool,
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    config: ModelConfig,
    towers: [Tower; 2],
    info: Vec<ParamInfo>,
    params: Vec<Matrix>,
    running: Vec<BatchStandardizeState>,
    temperature: usize,
    version: u64,
    trained_heads: Option<TrainedHeads>,
}

impl PartialEq for DualEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.running == other.running
    }
}

fn tower_index(m: Modality) -> usize {
    match m {
        Modality::Image => 0,
        Modality::Text => 1,
    }
}

impl DualEncoder {
    /// Weights `N(0, 1/fan_in)`, biases and BN shifts zero, BN scales one,
    /// `σ = 0.07`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let lay = layout(config)?;
        let mut r = rng::stream(seed, INIT_STREAM);
        let params = lay
            .specs
            .iter()
            .map(|(_, rows, cols, init)| match *init {
                Init::Normal { fan_in } => rng::normal_matrix(&mut r, *rows, *cols, 1.0 / (fan_in as f64).sqrt()),
                Init::Zeros => Matrix::zeros(*rows, *cols),
                Init::Ones => Matrix::filled(*rows, *cols, 1.0),
                Init::LogTemperature => Matrix::filled(1, 1, INITIAL_TEMPERATURE.ln()),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            towers: lay.towers,
            info: lay.specs.into_iter().map(|s| s.0).collect(),
            params,
            running: lay.stats.into_iter().map(BatchStandardizeState::new).collect(),
            temperature: lay.temperature,
            version: fresh_version(),
            trained_heads: None,
        })
    }

    pub fn trained_heads(&self) -> Option<TrainedHeads> {
        self.trained_heads
    }

    pub fn set_trained_heads(&mut self, heads: TrainedHeads) {
        self.trained_heads = Some(heads);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [Matrix] {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    pub fn running_stats(&self) -> &[BatchStandardizeState] {
        &self.running
    }

    pub fn temperature_index(&self) -> usize {
        self.temperature
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::from_log(self.params[self.temperature].data()[0])
    }

    /// Re-applies the temperature bounds after an unconstrained update.
    pub fn clamp_temperature(&mut self) {
        let t = self.temperature();
        self.params[self.temperature].data_mut()[0] = t.log_value();
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect()
    }

    fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.config.encoder.img_input_dim,
            Modality::Text => self.config.encoder.txt_input_dim,
        }
    }

    fn forward_tower(&self, m: Modality, x: &Matrix, mode: Mode) -> Result<(Encoded, TowerCache)> {
        if x.cols() != self.input_dim(m) {
            return Err(Error::DimensionMismatch(format!(
                "{m:?} input has {} columns, encoder expects {}",
                x.cols(),
                self.input_dim(m)
            )));
        }
        let t = &self.towers[tower_index(m)];
        let (p, st) = (&self.params[..], &self.running[..]);
        let (f, trunk) = layers::run(&t.trunk, x.clone(), p, st, mode)?;
        let (s, stem) = layers::run(&t.stem, f.clone(), p, st, mode)?;
        let (g, clip) = layers::run(&t.clip, s.clone(), p, st, mode)?;
        let (h, nclip) = layers::run(&t.nclip, s, p, st, mode)?;
        Ok((
            Encoded { f, g, h },
            TowerCache {
                trunk,
                stem,
                clip,
                nclip,
            },
        ))
    }

    /// Encodes one modality without keeping intermediates.
    pub fn encode(&self, m: Modality, x: &Matrix, mode: Mode) -> Result<Encoded> {
        Ok(self.forward_tower(m, x, mode)?.0)
    }

    pub fn forward_batch(&self, img: &Matrix, txt: &Matrix, mode: Mode) -> Result<ForwardOutput> {
        if img.rows() != txt.rows() {
            return Err(Error::DimensionMismatch(format!(
                "batch sizes differ: {} images, {} texts",
                img.rows(),
                txt.rows()
            )));
        }
        let (ei, ci) = self.forward_tower(Modality::Image, img, mode)?;
        let (et, ct) = self.forward_tower(Modality::Text, txt, mode)?;
        Ok(ForwardOutput {
            img: ei,
            txt: et,
            cache: ForwardCache {
                version: self.version,
                mode,
                towers: [ci, ct],
            },
        })
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::Precondition(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        Ok(())
    }

    /// Parameter gradients given upstream gradients of the four head outputs.
    /// The temperature slot is left at zero.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        d_g_img: &Matrix,
        d_g_txt: &Matrix,
        d_h_img: &Matrix,
        d_h_txt: &Matrix,
    ) -> Result<Vec<Matrix>> {
        self.check_cache(cache)?;
        let mut grads = self.zero_grads();
        for (ti, (dg, dh)) in [(d_g_img, d_h_img), (d_g_txt, d_h_txt)].into_iter().enumerate() {
            let t = &self.towers[ti];
            let c = &cache.towers[ti];
            let p = &self.params[..];
            let mut ds = layers::run_backward(&t.clip, &c.clip, dg.clone(), p, &mut grads);
            ds.add_scaled(
                &layers::run_backward(&t.nclip, &c.nclip, dh.clone(), p, &mut grads),
                1.0,
            );
            let df = layers::run_backward(&t.stem, &c.stem, ds, p, &mut grads);
            layers::run_backward(&t.trunk, &c.trunk, df, p, &mut grads);
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        self.check_cache(cache)?;
        if cache.mode != Mode::Train {
            return Err(Error::Precondition(
                "running statistics need a train-mode forward pass".into(),
            ));
        }
        for (t, c) in self.towers.iter().zip(&cache.towers) {
            for (stages, caches) in [
                (&t.trunk, &c.trunk),
                (&t.stem, &c.stem),
                (&t.clip, &c.clip),
                (&t.nclip, &c.nclip),
            ] {
                layers::update_running(stages, caches, &mut self.running);
            }
        }
        Ok(())
    }

    /// Output of every stage on the stem + non-contrastive path, in order.
    pub fn nclip_trace(&self, m: Modality, x: &Matrix, mode: Mode) -> Result<Vec<Matrix>> {
        let f = self.encode(m, x, mode)?.f;
        let t = &self.towers[tower_index(m)];
        let mut out = Vec::new();
        let mut cur = f;
        for s in t.stem.iter().chain(&t.nclip) {
            cur = s.forward(cur, &self.params, &self.running, mode)?.0;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .info
                .iter()
                .zip(&self.params)
                .map(|(i, p)| NamedTensor {
                    name: i.name.clone(),
                    value: p.clone(),
                })
                .collect(),
            running: self.running.clone(),
            trained_heads: self.trained_heads,
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "not a model checkpoint (format '{}')",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let lay = layout(&ck.config)?;
        if ck.params.len() != lay.specs.len() || ck.running.len() != lay.stats.len() {
            return Err(Error::Format(
                "checkpoint parameter list does not match its config".into(),
            ));
        }
        for (t, (info, rows, cols, _)) in ck.params.iter().zip(&lay.specs) {
            if t.name != info.name || t.value.shape() != (*rows, *cols) {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{}' {:?} where '{}' ({rows}, {cols}) was expected",
                    t.name,
                    t.value.shape(),
                    info.name
                )));
            }
            if !t.value.is_finite() {
                return Err(Error::Format(format!("checkpoint tensor '{}' is not finite", t.name)));
            }
        }
        for (s, &dim) in ck.running.iter().zip(&lay.stats) {
            if s.mean.len() != dim || s.var.len() != dim || s.var.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Format("checkpoint running statistics are malformed".into()));
            }
        }
        Ok(Self {
            config: ck.config,
            towers: lay.towers,
            info: lay.specs.into_iter().map(|s| s.0).collect(),
            params: ck.params.into_iter().map(|t| t.value).collect(),
            running: ck.running,
            temperature: lay.temperature,
            version: fresh_version(),
            trained_heads: ck.trained_heads,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests;
