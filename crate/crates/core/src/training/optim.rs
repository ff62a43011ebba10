use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Linear warm-up followed by cosine decay, in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Zero means "derive from the dataset and batch size".
    pub steps_per_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            end_lr: 2e-6,
            warmup_epochs: 3,
            total_epochs: 32,
            steps_per_epoch: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.end_lr > 0.0 && self.end_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need 0 < end_lr <= peak_lr, got {} and {}",
                self.end_lr, self.peak_lr
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate at `step ∈ [0, total_steps]`: `0` at step 0, exactly
/// `peak_lr` at the end of warm-up and exactly `end_lr` at the final step.
pub fn lr_at(s: &ScheduleConfig, step: usize) -> Result<f64> {
    s.validate()?;
    let (warm, total) = (s.warmup_steps(), s.total_steps());
    if s.steps_per_epoch == 0 || step > total {
        return Err(Error::Parameter(format!("step {step} outside schedule [0, {total}]")));
    }
    if step <= warm && warm > 0 {
        return Ok(s.peak_lr * (step as f64 / warm as f64));
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(s.end_lr + (s.peak_lr - s.end_lr) * c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Matrix]) -> Self {
        let z = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: z(),
            v: z(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. `decay[i]` selects which tensors
/// receive weight decay.
pub fn adamw_update(
    cfg: &AdamWConfig,
    state: &mut OptimizerState,
    params: &mut [Matrix],
    grads: &[Matrix],
    lr: f64,
    decay: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::DimensionMismatch("optimizer tensor counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.ensure_same_shape(g, "adamw gradient")?;
        p.ensure_same_shape(&state.m[i], "adamw state")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gv;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gv * gv;
            let step = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            *pv -= lr * (step + wd * *pv);
        }
    }
    Ok(())
}

/// AdamW with β = (0.9, 0.98), ε = 1e-6 and weight decay `wd` on every tensor.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [Matrix], grads: &[Matrix], lr: f64, wd: f64) -> Result<()> {
    let cfg = AdamWConfig {
        weight_decay: wd,
        ..AdamWConfig::default()
    };
    adamw_update(&cfg, state, params, grads, lr, &vec![true; params.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> ScheduleConfig {
        ScheduleConfig {
            steps_per_epoch: 100,
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule();
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 300).unwrap(), 1e-3);
        assert!((lr_at(&s, 3200).unwrap() - 2e-6).abs() < 1e-12);
        assert!(lr_at(&s, 3201).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_decaying() {
        let s = schedule();
        assert!((lr_at(&s, 301).unwrap() - 1e-3).abs() < 1e-8);
        let mut prev = lr_at(&s, 300).unwrap();
        for step in 301..=3200 {
            let lr = lr_at(&s, step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        let bad = ScheduleConfig {
            warmup_epochs: 32,
            ..schedule()
        };
        assert!(lr_at(&bad, 0).is_err());
    }

    #[test]
    fn first_adamw_step_by_hand() {
        let mut p = vec![Matrix::filled(1, 1, 1.0)];
        let g = vec![Matrix::filled(1, 1, 1.0)];
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut st, &mut p, &g, 0.1, 0.0).unwrap();
        // m̂ = v̂ = 1: 1 − 0.1 / (1 + 1e-6)
        assert!((p[0].data()[0] - (1.0 - 0.1 / (1.0 + 1e-6))).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9000001).abs() < 1e-9);
    }

    #[test]
    fn decay_only_and_identity() {
        let mut p = vec![Matrix::filled(1, 1, 1.0)];
        let g = vec![Matrix::zeros(1, 1)];
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut st, &mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p[0].data()[0], 1.0);
        adamw_step(&mut st, &mut p, &g, 0.1, 0.2).unwrap();
        assert!((p[0].data()[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn decay_mask_and_shape_checks() {
        let mut p = vec![Matrix::filled(1, 2, 1.0), Matrix::filled(1, 1, 1.0)];
        let g = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 1)];
        let mut st = OptimizerState::new(&p);
        adamw_update(&AdamWConfig::default(), &mut st, &mut p, &g, 0.1, &[false, true]).unwrap();
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert!((p[1].data()[0] - 0.98).abs() < 1e-15);
        let bad = vec![Matrix::zeros(2, 1), Matrix::zeros(1, 1)];
        assert!(adamw_update(&AdamWConfig::default(), &mut st, &mut p, &bad, 0.1, &[true, true]).is_err());
    }
}
