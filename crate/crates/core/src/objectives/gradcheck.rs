//! Central finite-difference verification of the analytic gradients.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

use super::{
    clip_loss, entropy_regularizers, nclip_ce, nclip_loss, shared_latent_loss, unified_loss,
    unified_loss_fixed_targets, xclip_loss, LossOutput, MixWeights, RegularizerWeights, TargetTransform, Temperature,
    TransformKind,
};

/// Loss under test. Unified variants carry the transform presets (target
/// temperature and regularizer weights) used for the check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Clip,
    NclipCe,
    EntropyEh,
    EntropyHe,
    Nclip,
    Xclip,
    UnifiedIdentity,
    UnifiedMsn,
    UnifiedSinkhorn,
    UnifiedBatchSoftmax,
    UnifiedCentering,
    SharedLatent,
}

impl LossId {
    pub const ALL: [LossId; 12] = [
        LossId::Clip,
        LossId::NclipCe,
        LossId::EntropyEh,
        LossId::EntropyHe,
        LossId::Nclip,
        LossId::Xclip,
        LossId::UnifiedIdentity,
        LossId::UnifiedMsn,
        LossId::UnifiedSinkhorn,
        LossId::UnifiedBatchSoftmax,
        LossId::UnifiedCentering,
        LossId::SharedLatent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::Clip => "clip",
            LossId::NclipCe => "nclip_ce",
            LossId::EntropyEh => "entropy_eh",
            LossId::EntropyHe => "entropy_he",
            LossId::Nclip => "nclip",
            LossId::Xclip => "xclip",
            LossId::UnifiedIdentity => "unified_identity",
            LossId::UnifiedMsn => "unified_msn",
            LossId::UnifiedSinkhorn => "unified_sinkhorn",
            LossId::UnifiedBatchSoftmax => "unified_batch_softmax",
            LossId::UnifiedCentering => "unified_centering",
            LossId::SharedLatent => "shared_latent",
        }
    }

    fn num_inputs(self) -> usize {
        if self == LossId::Xclip {
            4
        } else {
            2
        }
    }

    fn has_temperature(self) -> bool {
        matches!(self, LossId::Clip | LossId::Xclip | LossId::SharedLatent)
    }

    fn input_names(self) -> &'static [&'static str] {
        if self == LossId::Xclip {
            &["g_img", "g_txt", "h_img", "h_txt"]
        } else {
            &["img", "txt"]
        }
    }

    fn transform(self, k: usize) -> Option<(TargetTransform, RegularizerWeights)> {
        let w = |a, b| RegularizerWeights::new(a, b).unwrap();
        Some(match self {
            LossId::UnifiedIdentity => (
                TargetTransform::new(TransformKind::Identity, 1.0, 1.0).unwrap(),
                w(0.5, 1.5),
            ),
            LossId::UnifiedMsn => (TargetTransform::msn(), w(0.0, 1.0)),
            LossId::UnifiedSinkhorn => (TargetTransform::swav(), w(0.0, 1.0)),
            LossId::UnifiedBatchSoftmax => (TargetTransform::scsf(), w(0.0, 0.0)),
            LossId::UnifiedCentering => (TargetTransform::dino(k), w(0.0, 0.0)),
            _ => return None,
        })
    }
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockError {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: LossId,
    pub shape: (usize, usize),
    pub seed: u64,
    pub step: f64,
    /// `‖g_a − g_n‖_∞ / (‖g_n‖_∞ + 1e-12)` over every coordinate.
    pub max_rel_error: f64,
    /// Block and flat index of the largest absolute discrepancy.
    pub worst_block: String,
    pub worst_index: usize,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn block(&self, name: &str) -> Option<&BlockError> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Checks the analytic gradients of `loss` on seeded standard-normal inputs
/// of shape `(B, K)` against central differences with the given step.
pub fn finite_difference_check(loss: LossId, shape: (usize, usize), seed: u64, step: f64) -> Result<GradCheckReport> {
    finite_difference_check_with(loss, shape, seed, step, |_| {})
}

/// As [`finite_difference_check`], letting the caller tamper with the
/// analytic output before comparison (used to confirm the check can fail).
pub fn finite_difference_check_with(
    loss: LossId,
    shape: (usize, usize),
    seed: u64,
    step: f64,
    tamper: impl Fn(&mut LossOutput),
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Parameter(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    let (b, k) = shape;
    if b < 2 || k < 2 {
        return Err(Error::Parameter(format!("gradient check shape ({b}, {k}) too small")));
    }
    let mut r = rng::stream(seed, 0);
    let inputs: Vec<Matrix> = (0..loss.num_inputs())
        .map(|_| rng::normal_matrix(&mut r, b, k, 1.0))
        .collect();
    let log_temp = match loss {
        LossId::SharedLatent => 0.0,
        _ => 0.5f64.ln(),
    };

    let mut analytic = eval(loss, &inputs, log_temp)?;
    tamper(&mut analytic);

    // stop-gradient transforms: differentiate with the targets frozen at the base point
    let frozen = match loss.transform(k) {
        Some((mut tt, _)) if tt.kind.stops_gradient() => Some(tt.targets(&inputs[0], &inputs[1])?),
        _ => None,
    };
    let value_at = |xs: &[Matrix], lt: f64| -> Result<f64> {
        Ok(match &frozen {
            Some((pi, pt)) => {
                let (tt, w) = loss.transform(k).unwrap();
                unified_loss_fixed_targets(&xs[0], &xs[1], pi, pt, tt.prediction_temperature, w)?.value
            }
            None => eval(loss, xs, lt)?.value,
        })
    };

    let mut blocks_a: Vec<Vec<f64>> = analytic.grads.iter().map(|g| g.data().to_vec()).collect();
    let mut blocks_n: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = loss.input_names().iter().map(|s| s.to_string()).collect();
    let mut xs = inputs.clone();
    for m in 0..xs.len() {
        let mut numeric = vec![0.0; xs[m].data().len()];
        for (idx, n) in numeric.iter_mut().enumerate() {
            let orig = xs[m].data()[idx];
            xs[m].data_mut()[idx] = orig + step;
            let plus = value_at(&xs, log_temp)?;
            xs[m].data_mut()[idx] = orig - step;
            let minus = value_at(&xs, log_temp)?;
            xs[m].data_mut()[idx] = orig;
            *n = (plus - minus) / (2.0 * step);
        }
        blocks_n.push(numeric);
    }
    if loss.has_temperature() {
        let plus = value_at(&xs, log_temp + step)?;
        let minus = value_at(&xs, log_temp - step)?;
        blocks_n.push(vec![(plus - minus) / (2.0 * step)]);
        blocks_a.push(vec![analytic.temp_grad]);
        names.push("log_temperature".into());
    }

    let mut blocks = Vec::new();
    let (mut max_diff, mut max_num) = (0.0f64, 0.0f64);
    let (mut worst_block, mut worst_index) = (names[0].clone(), 0);
    for ((name, a), n) in names.iter().zip(&blocks_a).zip(&blocks_n) {
        let mut block_diff = 0.0f64;
        let block_num = n.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (i, (x, y)) in a.iter().zip(n).enumerate() {
            let d = (x - y).abs();
            if d > block_diff {
                block_diff = d;
            }
            if d > max_diff {
                max_diff = d;
                worst_block = name.clone();
                worst_index = i;
            }
        }
        max_num = max_num.max(block_num);
        blocks.push(BlockError {
            name: name.clone(),
            rel_error: block_diff / (block_num + 1e-12),
            max_abs_numeric: block_num,
        });
    }
    Ok(GradCheckReport {
        loss,
        shape,
        seed,
        step,
        max_rel_error: max_diff / (max_num + 1e-12),
        worst_block,
        worst_index,
        blocks,
    })
}

/// Evaluates `loss` at the given inputs and log temperature.
fn eval(loss: LossId, xs: &[Matrix], log_temp: f64) -> Result<LossOutput> {
    let t = Temperature::from_log(log_temp);
    let w = RegularizerWeights::default();
    match loss {
        LossId::Clip => clip_loss(&xs[0], &xs[1], t),
        LossId::NclipCe => nclip_ce(&xs[0], &xs[1]),
        LossId::EntropyEh => Ok(entropy_regularizers(&xs[0], &xs[1])?.0),
        LossId::EntropyHe => Ok(entropy_regularizers(&xs[0], &xs[1])?.1),
        LossId::Nclip => nclip_loss(&xs[0], &xs[1], w),
        LossId::Xclip => xclip_loss(&xs[0], &xs[1], &xs[2], &xs[3], t, w, MixWeights::default()),
        LossId::SharedLatent => shared_latent_loss(&xs[0], &xs[1], t, RegularizerWeights::new(3.0, 4.0)?),
        unified => {
            let (mut tt, w) = unified.transform(xs[0].cols()).expect("unified variant");
            unified_loss(&xs[0], &xs[1], &mut tt, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_passes_for_every_loss() {
        for id in LossId::ALL {
            let r = finite_difference_check(id, (8, 16), 0, 1e-4).unwrap();
            assert!(r.passes(DEFAULT_TOLERANCE), "{id}: {r:?}");
        }
    }

    #[test]
    fn xclip_temperature_block() {
        let r = finite_difference_check(LossId::Xclip, (8, 16), 0, 1e-4).unwrap();
        let t = r.block("log_temperature").unwrap();
        assert!(t.max_abs_numeric > 1e-6);
        assert!(t.rel_error < 1e-4, "{t:?}");
    }

    #[test]
    fn sign_flip_is_detected() {
        let r = finite_difference_check_with(LossId::Nclip, (4, 8), 0, 1e-4, |out| out.grads[0].scale_in_place(-1.0))
            .unwrap();
        assert!(!r.passes(DEFAULT_TOLERANCE));
    }

    #[test]
    fn parse_and_reject() {
        assert_eq!("unified_sinkhorn".parse::<LossId>().unwrap(), LossId::UnifiedSinkhorn);
        assert!("infonce".parse::<LossId>().is_err());
        assert!(finite_difference_check(LossId::Clip, (4, 8), 0, 1e-2).is_err());
    }
}
