use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{column_means, l2_normalize_with_norms};
use crate::objectives::contrastive::normalize_backward;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-dimension statistics of one batch-standardization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStandardizeState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStandardizeState {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Stage {
    /// `y = x W (+ b)`, `W` stored `in × out`.
    Linear {
        w: usize,
        b: Option<usize>,
    },
    Norm {
        affine: Option<(usize, usize)>,
        stats: usize,
    },
    Gelu,
    L2Norm,
}

#[derive(Clone, Debug)]
pub(crate) enum StageCache {
    Linear(Matrix),
    Norm {
        xhat: Matrix,
        inv_std: Vec<f64>,
        /// Batch mean and biased variance; `None` in eval mode.
        batch: Option<(Vec<f64>, Vec<f64>)>,
    },
    Gelu(Matrix),
    L2Norm {
        out: Matrix,
        norms: Vec<f64>,
    },
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Stage {
    pub(crate) fn forward(
        &self,
        x: Matrix,
        params: &[Matrix],
        running: &[BatchStandardizeState],
        mode: Mode,
    ) -> Result<(Matrix, StageCache)> {
        match *self {
            Stage::Linear { w, b } => {
                let mut y = x.matmul(&params[w]);
                if let Some(b) = b {
                    let bias = params[b].data();
                    for i in 0..y.rows() {
                        for (v, bv) in y.row_mut(i).iter_mut().zip(bias) {
                            *v += bv;
                        }
                    }
                }
                Ok((y, StageCache::Linear(x)))
            }
            Stage::Norm { affine, stats } => {
                let (rows, cols) = x.shape();
                let (mean, var, batch) = match mode {
                    Mode::Train => {
                        if rows < 2 {
                            return Err(Error::Precondition(
                                "batch standardization needs at least 2 rows in train mode".into(),
                            ));
                        }
                        let mean = column_means(&x);
                        let mut var = vec![0.0; cols];
                        for r in x.row_iter() {
                            for ((v, &xv), m) in var.iter_mut().zip(r).zip(&mean) {
                                *v += (xv - m) * (xv - m);
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= rows as f64);
                        (mean.clone(), var.clone(), Some((mean, var)))
                    }
                    Mode::Eval => (running[stats].mean.clone(), running[stats].var.clone(), None),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                let xhat = Matrix::from_fn(rows, cols, |i, j| (x[(i, j)] - mean[j]) * inv_std[j]);
                let y = match affine {
                    Some((g, b)) => {
                        let (g, b) = (params[g].data(), params[b].data());
                        Matrix::from_fn(rows, cols, |i, j| g[j] * xhat[(i, j)] + b[j])
                    }
                    None => xhat.clone(),
                };
                Ok((y, StageCache::Norm { xhat, inv_std, batch }))
            }
            Stage::Gelu => Ok((x.map(gelu), StageCache::Gelu(x))),
            Stage::L2Norm => {
                let (out, norms) = l2_normalize_with_norms(&x)?;
                Ok((out.clone(), StageCache::L2Norm { out, norms }))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub(crate) fn backward(&self, cache: &StageCache, dy: &Matrix, params: &[Matrix], grads: &mut [Matrix]) -> Matrix {
        match (self, cache) {
            (Stage::Linear { w, b }, StageCache::Linear(x)) => {
                grads[*w].add_scaled(&x.t_matmul(dy), 1.0);
                if let Some(b) = b {
                    let gb = grads[*b].data_mut();
                    for r in dy.row_iter() {
                        for (g, v) in gb.iter_mut().zip(r) {
                            *g += v;
                        }
                    }
                }
                dy.matmul_t(&params[*w])
            }
            (Stage::Norm { affine, .. }, StageCache::Norm { xhat, inv_std, batch }) => {
                let (rows, cols) = xhat.shape();
                let dxhat = match affine {
                    Some((g, b)) => {
                        let gamma = params[*g].data().to_vec();
                        let mut dg = vec![0.0; cols];
                        let mut db = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dg[j] += dy[(i, j)] * xhat[(i, j)];
                                db[j] += dy[(i, j)];
                            }
                        }
                        grads[*g].data_mut().iter_mut().zip(&dg).for_each(|(a, v)| *a += v);
                        grads[*b].data_mut().iter_mut().zip(&db).for_each(|(a, v)| *a += v);
                        Matrix::from_fn(rows, cols, |i, j| dy[(i, j)] * gamma[j])
                    }
                    None => dy.clone(),
                };
                if batch.is_none() {
                    return Matrix::from_fn(rows, cols, |i, j| dxhat[(i, j)] * inv_std[j]);
                }
                // batch statistics couple every row: dx = (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat)) / std
                let n = rows as f64;
                let mut sum_d = vec![0.0; cols];
                let mut sum_dx = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        sum_d[j] += dxhat[(i, j)];
                        sum_dx[j] += dxhat[(i, j)] * xhat[(i, j)];
                    }
                }
                Matrix::from_fn(rows, cols, |i, j| {
                    inv_std[j] * (dxhat[(i, j)] - sum_d[j] / n - xhat[(i, j)] * sum_dx[j] / n)
                })
            }
            (Stage::Gelu, StageCache::Gelu(x)) => dy.zip_map(x, |d, v| d * gelu_grad(v)),
            (Stage::L2Norm, StageCache::L2Norm { out, norms }) => normalize_backward(out, norms, dy),
            _ => unreachable!("stage/cache kinds always match"),
        }
    }
}

/// Runs a stage sequence, returning the output and one cache per stage.
pub(crate) fn run(
    stages: &[Stage],
    mut x: Matrix,
    params: &[Matrix],
    running: &[BatchStandardizeState],
    mode: Mode,
) -> Result<(Matrix, Vec<StageCache>)> {
    let mut caches = Vec::with_capacity(stages.len());
    for s in stages {
        let (y, c) = s.forward(x, params, running, mode)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

pub(crate) fn run_backward(
    stages: &[Stage],
    caches: &[StageCache],
    mut dy: Matrix,
    params: &[Matrix],
    grads: &mut [Matrix],
) -> Matrix {
    for (s, c) in stages.iter().zip(caches).rev() {
        dy = s.backward(c, &dy, params, grads);
    }
    dy
}

/// EMA update of running statistics from train-mode caches. Running variance
/// uses the unbiased batch estimate.
pub(crate) fn update_running(stages: &[Stage], caches: &[StageCache], running: &mut [BatchStandardizeState]) {
    for (s, c) in stages.iter().zip(caches) {
        if let (
            Stage::Norm { stats, .. },
            StageCache::Norm {
                xhat,
                batch: Some((mean, var)),
                ..
            },
        ) = (s, c)
        {
            let n = xhat.rows() as f64;
            let st = &mut running[*stats];
            for j in 0..mean.len() {
                st.mean[j] = (1.0 - BN_MOMENTUM) * st.mean[j] + BN_MOMENTUM * mean[j];
                st.var[j] = (1.0 - BN_MOMENTUM) * st.var[j] + BN_MOMENTUM * var[j] * n / (n - 1.0);
            }
        }
    }
}
