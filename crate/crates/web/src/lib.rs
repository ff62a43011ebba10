//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export takes plain numbers and returns a flat `Float64Array`, so the
//! page needs no glue beyond the generated module.

use nclip::data::{generate_synthetic, ConceptWorld, PairDataset};
use nclip::objectives::{clip_loss, TargetTransform, Temperature, TransformKindName};
use nclip::rng;
use nclip::training::{ObjectiveKind, TrainConfig, Trainer};
use nclip::Matrix;
use wasm_bindgen::prelude::*;

fn js_err(e: nclip::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Values per step in [`CollapseRun::run_epoch`] output.
pub const STEP_FIELDS: usize = 5;

/// Non-contrastive training on the default synthetic world (C=16, B=64,
/// K=64, 10 epochs of 100 steps), advanced one epoch per call.
#[wasm_bindgen]
pub struct CollapseRun {
    trainer: Trainer,
    data: PairDataset,
}

impl CollapseRun {
    pub fn build(lambda1: f64, lambda2: f64, seed: u64) -> nclip::Result<Self> {
        let data = generate_synthetic(&ConceptWorld::default(), seed)?;
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        cfg.objective.kind = ObjectiveKind::Nclip;
        cfg.objective.lambda1 = lambda1;
        cfg.objective.lambda2 = lambda2;
        cfg.model.nclip_head.output_dim = 64;
        cfg.schedule.total_epochs = 10;
        cfg.schedule.warmup_epochs = 1;
        let trainer = Trainer::new(&cfg, &data)?;
        Ok(Self { trainer, data })
    }

    pub fn epoch(&mut self) -> nclip::Result<Vec<f64>> {
        let mut out = Vec::new();
        if self.trainer.finished() {
            return Ok(out);
        }
        self.trainer.run_epoch(&self.data, |s| {
            out.extend([s.step as f64, s.row_std, s.acc_nc, s.l_eh, s.l_he]);
            Ok(())
        })?;
        Ok(out)
    }
}

#[wasm_bindgen]
impl CollapseRun {
    #[wasm_bindgen(constructor)]
    pub fn new(lambda1: f64, lambda2: f64, seed: u32) -> Result<CollapseRun, JsValue> {
        Self::build(lambda1, lambda2, seed as u64).map_err(js_err)
    }

    /// Rows of `[step, row_std, acc_nc, l_eh, l_he]`, flattened; empty once
    /// the schedule is done.
    pub fn run_epoch(&mut self) -> Result<Vec<f64>, JsValue> {
        self.epoch().map_err(js_err)
    }

    pub fn total_steps(&self) -> u32 {
        self.trainer.total_steps() as u32
    }

    pub fn output_dim(&self) -> u32 {
        self.trainer.config.model.nclip_head.output_dim as u32
    }
}

/// Image then text targets of one transform on seeded logits, each `b × k`
/// row-major.
pub fn transform_targets(
    kind: &str,
    b: usize,
    k: usize,
    target_temperature: f64,
    seed: u64,
) -> nclip::Result<Vec<f64>> {
    let name: TransformKindName = kind.parse()?;
    let mut tt = TargetTransform::from_name(name, k, target_temperature, 1.0)?;
    let mut r = rng::stream(seed, 0);
    let img = rng::normal_matrix(&mut r, b, k, 1.0);
    // text logits share most of their structure with the image logits
    let txt = img.zip_map(&rng::normal_matrix(&mut r, b, k, 1.0), |a, n| 0.8 * a + 0.6 * n);
    let (pi, pt) = tt.targets(&img, &txt)?;
    Ok(pi
        .as_matrix()
        .data()
        .iter()
        .chain(pt.as_matrix().data())
        .copied()
        .collect())
}

#[wasm_bindgen]
pub fn transform_heatmap(kind: &str, b: u32, k: u32, target_temperature: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    transform_targets(kind, b as usize, k as usize, target_temperature, seed as u64).map_err(js_err)
}

/// CLIP loss at each σ for seeded embeddings whose text side is
/// `alignment·image + sqrt(1 − alignment²)·noise`.
pub fn clip_curve(b: usize, dim: usize, alignment: f64, seed: u64, sigmas: &[f64]) -> nclip::Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alignment) {
        return Err(nclip::Error::Parameter(format!("alignment {alignment} outside [0, 1]")));
    }
    let mut r = rng::stream(seed, 0);
    let img = rng::normal_matrix(&mut r, b, dim, 1.0);
    let noise = rng::normal_matrix(&mut r, b, dim, 1.0);
    let rest = (1.0 - alignment * alignment).sqrt();
    let txt: Matrix = img.zip_map(&noise, |a, n| alignment * a + rest * n);
    sigmas
        .iter()
        .map(|&s| Ok(clip_loss(&img, &txt, Temperature::from_value(s)?)?.value))
        .collect()
}

#[wasm_bindgen]
pub fn clip_loss_curve(b: u32, dim: u32, alignment: f64, seed: u32, sigmas: &[f64]) -> Result<Vec<f64>, JsValue> {
    clip_curve(b as usize, dim as usize, alignment, seed as u64, sigmas).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinkhorn_heatmap_rows_are_distributions() {
        let v = transform_targets("sinkhorn", 8, 8, 0.25, 0).unwrap();
        assert_eq!(v.len(), 2 * 64);
        for row in v.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(transform_targets("sinkhorm", 8, 8, 0.25, 0).is_err());
    }

    #[test]
    fn clip_curve_at_full_alignment_falls_with_sigma() {
        let v = clip_curve(16, 8, 1.0, 0, &[1.0, 0.1, 0.01]).unwrap();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
        assert!(v[0] < (16f64).ln());
    }

    #[test]
    fn collapse_run_reports_every_step() {
        let mut run = CollapseRun::build(0.5, 1.5, 0).unwrap();
        let rows = run.epoch().unwrap();
        assert_eq!(rows.len(), 100 * STEP_FIELDS);
        assert_eq!(rows[STEP_FIELDS * 99], 99.0);
    }
}
