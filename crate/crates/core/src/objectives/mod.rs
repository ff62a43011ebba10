//! The loss family: contrastive InfoNCE, the non-contrastive cross-entropy
//! objective with its entropy regularizers, their multi-task combination,
//! the unified target-transform objective and the shared-latent hybrid.
//!
//! Every loss returns a [`LossOutput`] whose gradients are taken with respect
//! to the raw inputs (pre-normalization features or pre-softmax logits) and
//! with respect to the log temperature.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub(crate) mod contrastive;
pub mod gradcheck;
mod non_contrastive;
mod shared_latent;
mod unified;

pub use contrastive::clip_loss;
pub use gradcheck::{finite_difference_check, GradCheckReport, LossId};
pub use non_contrastive::{collapse_gradient_probe, entropy_regularizers, nclip_ce, nclip_loss, xclip_loss};
pub use shared_latent::shared_latent_loss;
pub use unified::{unified_loss, unified_loss_fixed_targets, TargetTransform, TransformKind, TransformKindName};

/// Learned softmax temperature σ, stored as `ln σ`.
///
/// σ is kept inside `[MIN, MAX]` by clamping the log value on every write.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    log_value: f64,
}

impl Temperature {
    pub const MIN: f64 = 0.01;
    pub const MAX: f64 = 100.0;

    pub fn from_value(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be positive, got {sigma}")));
        }
        Ok(Self::from_log(sigma.ln()))
    }

    pub fn from_log(log_value: f64) -> Self {
        let mut t = Self { log_value: 0.0 };
        t.set_log_value(log_value);
        t
    }

    pub fn log_value(&self) -> f64 {
        self.log_value
    }

    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    pub fn set_log_value(&mut self, v: f64) {
        self.log_value = v.clamp(Self::MIN.ln(), Self::MAX.ln());
    }
}

/// Weights of the sharpness (EH) and smoothness (HE) regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1.5,
        }
    }
}

impl RegularizerWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(Error::Parameter(format!(
                "regularizer weights must be non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

/// Multi-task weights of the contrastive and non-contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub lambda_clip: f64,
    pub lambda_nclip: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            lambda_clip: 0.2,
            lambda_nclip: 1.0,
        }
    }
}

impl MixWeights {
    pub fn new(lambda_clip: f64, lambda_nclip: f64) -> Result<Self> {
        if !(lambda_clip >= 0.0 && lambda_nclip >= 0.0) || lambda_clip + lambda_nclip == 0.0 {
            return Err(Error::Parameter(format!(
                "mix weights must be non-negative and not both zero, got ({lambda_clip}, {lambda_nclip})"
            )));
        }
        Ok(Self {
            lambda_clip,
            lambda_nclip,
        })
    }
}

/// Loss value with gradients for every input matrix (in argument order) and
/// for `ln σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Matrix>,
    /// d(value)/d(ln σ); zero when the loss has no temperature.
    pub temp_grad: f64,
    /// Named sub-loss values for monitoring.
    pub components: BTreeMap<&'static str, f64>,
}

impl LossOutput {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub(crate) fn with_component(mut self, name: &'static str, v: f64) -> Self {
        self.components.insert(name, v);
        self
    }
}

pub(crate) fn ensure_pair(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    a.ensure_same_shape(b, what)?;
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Input(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Row-direction InfoNCE over a square logit matrix with positives on the
/// diagonal: value and d(value)/d(logits).
pub(crate) fn info_nce(logits: &Matrix) -> (f64, Matrix) {
    let b = logits.rows();
    let bf = b as f64;
    let mut grad = logits.clone();
    let mut value = 0.0;
    for i in 0..b {
        let row = grad.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
        let lse = m + s.ln();
        value += lse - row[i];
        for z in row.iter_mut() {
            *z = (*z - lse).exp() / bf;
        }
        row[i] -= 1.0 / bf;
    }
    (value / bf, grad)
}

/// Backward through `p = softmax(z)`: `p ⊙ (g − pᵀg)` row by row.
pub(crate) fn softmax_backward(p: &Matrix, grad_p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let pr = p.row(i);
        let gr = grad_p.row(i);
        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &gv) in out.row_mut(i).iter_mut().zip(pr).zip(gr) {
            *o = pv * (gv - inner);
        }
    }
    out
}

/// Backward through `l = log_softmax(z)`: `g − p · Σg` row by row.
pub(crate) fn log_softmax_backward(p: &Matrix, grad_l: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let gr = grad_l.row(i);
        let total: f64 = gr.iter().sum();
        for ((o, &pv), &gv) in out.row_mut(i).iter_mut().zip(p.row(i)).zip(gr) {
            *o = gv - pv * total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_is_clamped() {
        assert!((Temperature::from_value(1e-6).unwrap().value() - 0.01).abs() < 1e-15);
        assert!((Temperature::from_value(1e6).unwrap().value() - 100.0).abs() < 1e-9);
        let mut t = Temperature::from_value(0.07).unwrap();
        assert!((t.value() - 0.07).abs() < 1e-15);
        t.set_log_value(50.0);
        assert!((t.value() - 100.0).abs() < 1e-9);
        assert!(Temperature::from_value(0.0).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(MixWeights::new(0.0, 0.0).is_err());
        assert!(MixWeights::new(0.2, 1.0).is_ok());
        assert!(RegularizerWeights::new(-1.0, 1.0).is_err());
    }
}
