//! Cross-entropy between a (possibly transformed) target assignment and a
//! prediction assignment, with the entropy regularizers applied to the
//! target. Different transforms and temperature ratios recover the
//! SwAV-, SCSF-, DINO- and MSN-style objectives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{
    batch_softmax, centering_transform, log_softmax_rows, sinkhorn_normalize, CenteringState, ProbMatrix,
};

use super::non_contrastive::{entropy_terms, Assignment};
use super::{ensure_pair, softmax_backward, LossOutput, RegularizerWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    /// Plain softmax at the target temperature; gradients reach both branches.
    Identity,
    /// Sinkhorn equipartition of the target softmax.
    Sinkhorn { iterations: usize },
    /// Softmax over the batch dimension, rows renormalized.
    BatchSoftmax,
    /// Running standardization of the logits before the target softmax.
    Centering {
        image: CenteringState,
        text: CenteringState,
        update: bool,
    },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Sinkhorn { .. } => "sinkhorn",
            TransformKind::BatchSoftmax => "batch_softmax",
            TransformKind::Centering { .. } => "centering",
        }
    }

    /// Whether the target is treated as a constant during backpropagation.
    pub fn stops_gradient(&self) -> bool {
        !matches!(self, TransformKind::Identity)
    }
}

/// Names accepted by [`TransformKindName::from_str`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKindName {
    Identity,
    Sinkhorn,
    BatchSoftmax,
    Centering,
}

impl FromStr for TransformKindName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "sinkhorn" => Self::Sinkhorn,
            "batch_softmax" => Self::BatchSoftmax,
            "centering" => Self::Centering,
            other => return Err(Error::Config(format!("unknown target transform '{other}'"))),
        })
    }
}

impl fmt::Display for TransformKindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Sinkhorn => "sinkhorn",
            Self::BatchSoftmax => "batch_softmax",
            Self::Centering => "centering",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    pub kind: TransformKind,
    /// τ_s, applied to the target branch.
    pub target_temperature: f64,
    /// τ, applied to the prediction branch.
    pub prediction_temperature: f64,
}

pub const DEFAULT_SINKHORN_ITERATIONS: usize = 3;
pub const DEFAULT_CENTERING_MOMENTUM: f64 = 0.1;

impl TargetTransform {
    pub fn new(kind: TransformKind, target_temperature: f64, prediction_temperature: f64) -> Result<Self> {
        for t in [target_temperature, prediction_temperature] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Parameter(format!("temperatures must be positive, got {t}")));
            }
        }
        if let TransformKind::Sinkhorn { iterations: 0 } = kind {
            return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
        }
        Ok(Self {
            kind,
            target_temperature,
            prediction_temperature,
        })
    }

    /// Builds a transform from its name; `k` sizes the centering state.
    pub fn from_name(
        name: TransformKindName,
        k: usize,
        target_temperature: f64,
        prediction_temperature: f64,
    ) -> Result<Self> {
        let kind = match name {
            TransformKindName::Identity => TransformKind::Identity,
            TransformKindName::Sinkhorn => TransformKind::Sinkhorn {
                iterations: DEFAULT_SINKHORN_ITERATIONS,
            },
            TransformKindName::BatchSoftmax => TransformKind::BatchSoftmax,
            TransformKindName::Centering => TransformKind::Centering {
                image: CenteringState::new(k, DEFAULT_CENTERING_MOMENTUM)?,
                text: CenteringState::new(k, DEFAULT_CENTERING_MOMENTUM)?,
                update: true,
            },
        };
        Self::new(kind, target_temperature, prediction_temperature)
    }

    /// Sinkhorn targets at τ_s = 0.25.
    pub fn swav() -> Self {
        Self::new(
            TransformKind::Sinkhorn {
                iterations: DEFAULT_SINKHORN_ITERATIONS,
            },
            0.25,
            1.0,
        )
        .unwrap()
    }

    /// Batch-softmax targets at τ_s = 0.5.
    pub fn scsf() -> Self {
        Self::new(TransformKind::BatchSoftmax, 0.5, 1.0).unwrap()
    }

    /// Centered targets at τ_s = 0.7.
    pub fn dino(k: usize) -> Self {
        Self::from_name(TransformKindName::Centering, k, 0.7, 1.0).unwrap()
    }

    /// Sharpened identity targets at τ_s = 0.7 (pair with λ1 = 0, λ2 = 1).
    pub fn msn() -> Self {
        Self::new(TransformKind::Identity, 0.7, 1.0).unwrap()
    }

    /// Computes the target distributions for both modalities, updating
    /// centering statistics when configured to.
    pub fn targets(&mut self, f_img: &Matrix, f_txt: &Matrix) -> Result<(ProbMatrix, ProbMatrix)> {
        let ts = self.target_temperature;
        let one = |f: &Matrix, kind: &mut TransformKind, image: bool| -> Result<ProbMatrix> {
            match kind {
                TransformKind::Identity => crate::numerics::softmax_rows(f, ts),
                // exp(log_softmax) is the τ_s-softmax, so Sinkhorn starts from it
                TransformKind::Sinkhorn { iterations } => {
                    sinkhorn_normalize(&log_softmax_rows(f, ts)?, *iterations, 1.0)
                }
                TransformKind::BatchSoftmax => batch_softmax(f, ts),
                TransformKind::Centering {
                    image: si,
                    text: st,
                    update,
                } => {
                    let state = if image { si } else { st };
                    centering_transform(f, state, ts, *update)
                }
            }
        };
        let p_img = one(f_img, &mut self.kind, true)?;
        let p_txt = one(f_txt, &mut self.kind, false)?;
        Ok((p_img, p_txt))
    }
}

/// Unified objective `CE(p, q) + λ1·EH(p) − λ2·HE(p)` with cross-modal
/// targets: `p_I` supervises `q_T` and `p_T` supervises `q_I`.
///
/// The identity transform backpropagates through both branches; every other
/// transform treats its target as a constant.
pub fn unified_loss(
    f_img: &Matrix,
    f_txt: &Matrix,
    tt: &mut TargetTransform,
    w: RegularizerWeights,
) -> Result<LossOutput> {
    ensure_pair(f_img, f_txt, "unified_loss")?;
    if tt.kind.stops_gradient() {
        let (p_img, p_txt) = tt.targets(f_img, f_txt)?;
        unified_loss_fixed_targets(f_img, f_txt, &p_img, &p_txt, tt.prediction_temperature, w)
    } else {
        let ts = tt.target_temperature;
        let tp = tt.prediction_temperature;
        let ti = Assignment::new(f_img, ts)?;
        let tx = Assignment::new(f_txt, ts)?;
        let qi = Assignment::new(f_img, tp)?;
        let qx = Assignment::new(f_txt, tp)?;
        let mut out = unified_core(&ti, &tx, &qi, &qx, tp, w);
        // target-branch gradients: CE through p, then the regularizers
        let ei = entropy_terms(&ti);
        let ex = entropy_terms(&tx);
        let b = f_img.rows() as f64;
        let through_p = |q_other: &Assignment| q_other.log_p.scale(-0.5 / b);
        let mut gi = softmax_backward(&ti.p, &through_p(&qx));
        let mut gx = softmax_backward(&tx.p, &through_p(&qi));
        for (g, e) in [(&mut gi, &ei), (&mut gx, &ex)] {
            g.add_scaled(&e.grad_eh, 0.5 * w.lambda1);
            g.add_scaled(&e.grad_he, -0.5 * w.lambda2);
            g.scale_in_place(1.0 / ts);
        }
        out.grads[0].add_scaled(&gi, 1.0);
        out.grads[1].add_scaled(&gx, 1.0);
        Ok(out)
    }
}

/// The unified objective evaluated against fixed target distributions.
/// Gradients reach only the prediction branch.
pub fn unified_loss_fixed_targets(
    f_img: &Matrix,
    f_txt: &Matrix,
    p_img: &ProbMatrix,
    p_txt: &ProbMatrix,
    prediction_temperature: f64,
    w: RegularizerWeights,
) -> Result<LossOutput> {
    ensure_pair(f_img, f_txt, "unified_loss")?;
    f_img.ensure_same_shape(p_img.as_matrix(), "unified_loss image target")?;
    f_txt.ensure_same_shape(p_txt.as_matrix(), "unified_loss text target")?;
    let target = |p: &ProbMatrix| Assignment {
        p: p.as_matrix().clone(),
        log_p: p.log(),
    };
    let qi = Assignment::new(f_img, prediction_temperature)?;
    let qx = Assignment::new(f_txt, prediction_temperature)?;
    Ok(unified_core(
        &target(p_img),
        &target(p_txt),
        &qi,
        &qx,
        prediction_temperature,
        w,
    ))
}

/// Value of the unified objective plus the gradient through the prediction
/// branch only.
fn unified_core(
    ti: &Assignment,
    tx: &Assignment,
    qi: &Assignment,
    qx: &Assignment,
    tp: f64,
    w: RegularizerWeights,
) -> LossOutput {
    let (b, k) = qi.p.shape();
    let bf = b as f64;
    let ce_dir = |p: &Assignment, q: &Assignment| -> f64 {
        let mut s = 0.0;
        for i in 0..b {
            s -=
                p.p.row(i)
                    .iter()
                    .zip(q.log_p.row(i))
                    .map(|(&x, &l)| crate::numerics::xlogy(x, l))
                    .sum::<f64>();
        }
        s / bf
    };
    let ce = 0.5 * (ce_dir(ti, qx) + ce_dir(tx, qi));
    let ei = entropy_terms(ti);
    let ex = entropy_terms(tx);
    let eh = 0.5 * (ei.eh + ex.eh);
    let he = 0.5 * (ei.he + ex.he);
    let value = ce + w.lambda1 * eh - w.lambda2 * he;

    // d/dz of −½·mean_i p_iᵀ log_softmax(z_i/τ) is (q − p) / (2Bτ) when Σp = 1
    let pred_grad = |q: &Assignment, p: &Assignment| {
        Matrix::from_fn(b, k, |i, j| {
            let mass: f64 = p.p.row(i).iter().sum();
            (q.p[(i, j)] * mass - p.p[(i, j)]) / (2.0 * bf * tp)
        })
    };
    LossOutput {
        value,
        grads: vec![pred_grad(qi, tx), pred_grad(qx, ti)],
        temp_grad: 0.0,
        components: Default::default(),
    }
    .with_component("ce", ce)
    .with_component("eh", eh)
    .with_component("he", he)
    .with_component("kl", ce - eh)
}
