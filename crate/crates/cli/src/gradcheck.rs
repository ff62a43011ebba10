use std::str::FromStr;

use nclip::objectives::gradcheck::{finite_difference_check_with, DEFAULT_TOLERANCE};
use nclip::objectives::{GradCheckReport, LossId};
use serde::Serialize;

use crate::error::CliError;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Empty means every loss.
    pub losses: Vec<String>,
    pub seeds: u64,
    pub shapes: Vec<(usize, usize)>,
    pub step: f64,
    pub tolerance: f64,
    /// Negates the first analytic gradient block (negative control).
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            losses: Vec::new(),
            seeds: 10,
            shapes: vec![(4, 8), (8, 16), (16, 64)],
            step: 1e-5,
            tolerance: DEFAULT_TOLERANCE,
            inject_sign_flip: false,
        }
    }
}

/// Worst case of one loss at one shape over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub loss: LossId,
    pub shape: (usize, usize),
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst_block: String,
    pub pass: bool,
}

pub fn parse_shape(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::usage(format!("shape '{s}' is not BxK"));
    let (b, k) = s.split_once('x').ok_or_else(bad)?;
    Ok((
        b.trim().parse().map_err(|_| bad())?,
        k.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>, CliError> {
    let losses: Vec<LossId> = if opts.losses.is_empty() {
        LossId::ALL.to_vec()
    } else {
        opts.losses
            .iter()
            .map(|s| LossId::from_str(s).map_err(CliError::usage))
            .collect::<Result<_, _>>()?
    };
    if opts.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let flip = opts.inject_sign_flip;
    let mut rows = Vec::new();
    for &loss in &losses {
        for &shape in &opts.shapes {
            let mut worst: Option<(u64, GradCheckReport)> = None;
            for seed in 0..opts.seeds {
                let r = finite_difference_check_with(loss, shape, seed, opts.step, |out| {
                    if flip {
                        out.grads[0].scale_in_place(-1.0);
                    }
                })
                .map_err(CliError::usage)?;
                if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error > w.max_rel_error) {
                    worst = Some((seed, r));
                }
            }
            let (seed, w) = worst.expect("at least one seed");
            rows.push(GradcheckRow {
                loss,
                shape,
                seeds: opts.seeds,
                max_rel_error: w.max_rel_error,
                worst_seed: seed,
                worst_block: w.worst_block.clone(),
                pass: w.passes(opts.tolerance),
            });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[GradcheckRow], tolerance: f64) -> String {
    let mut out = format!(
        "{:<22} {:>8} {:>6} {:>12} {:>10}  result (tol {tolerance:e})\n",
        "loss", "shape", "seeds", "max_rel_err", "worst"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<22} {:>8} {:>6} {:>12.3e} {:>10}  {}\n",
            r.loss.name(),
            format!("{}x{}", r.shape.0, r.shape.1),
            r.seeds,
            r.max_rel_error,
            r.worst_block,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}
