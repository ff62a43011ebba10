//! Numerically stable primitives shared by every objective: row and batch
//! softmax, entropies, L2 normalization and the target transforms used by the
//! unified objective (Sinkhorn, batch-softmax, centering).
//!
//! Reductions run left to right in index order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `ln(1e-30)`: floor applied to log-probabilities that meet a non-zero target.
pub const LOG_FLOOR: f64 = -69.077_552_789_821_37;

/// Rows with a smaller Euclidean norm cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;
const CENTERING_EPS: f64 = 1e-6;

/// A batch of probability distributions, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    /// Validates that every row is a distribution (non-negative, sums to 1
    /// within 1e-6).
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::Input("probability matrix must be non-empty".into()));
        }
        for (i, row) in m.row_iter().enumerate() {
            if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(Error::Input(format!("row {i} has invalid probability {x}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Input(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::from_matrix(Matrix::from_rows(rows)?)
    }

    /// K-way uniform distribution repeated over `rows` rows.
    pub fn uniform(rows: usize, k: usize) -> Self {
        Self(Matrix::filled(rows, k, 1.0 / k as f64))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        debug_assert!(m.row_iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
        Self(m)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Entrywise natural log, floored at [`LOG_FLOOR`].
    pub fn log(&self) -> Matrix {
        self.0.map(clamped_ln)
    }
}

impl TryFrom<Matrix> for ProbMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Self::from_matrix(m)
    }
}

impl From<ProbMatrix> for Matrix {
    fn from(p: ProbMatrix) -> Matrix {
        p.0
    }
}

#[inline]
pub(crate) fn clamped_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// `x · ln y` with the `0 · ln 0 = 0` limit convention.
#[inline]
pub(crate) fn xlogy(x: f64, log_y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * log_y
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn check_finite(x: &Matrix) -> Result<()> {
    if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
        let (i, j) = (pos / x.cols().max(1), pos % x.cols().max(1));
        return Err(Error::Input(format!(
            "non-finite entry {} at ({i}, {j})",
            x.data()[pos]
        )));
    }
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Input("empty matrix".into()));
    }
    Ok(())
}

/// Row-wise softmax of `x / temperature`, computed after subtracting each
/// row's maximum.
pub fn softmax_rows(x: &Matrix, temperature: f64) -> Result<ProbMatrix> {
    check_temperature(temperature)?;
    check_finite(x)?;
    let mut out = x.scale(1.0 / temperature);
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(ProbMatrix::from_matrix_unchecked(out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax_rows(x: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    check_finite(x)?;
    let mut out = x.scale(1.0 / temperature);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Matrix) -> Result<Matrix> {
    Ok(l2_normalize_with_norms(x)?.0)
}

/// Like [`l2_normalize_rows`] but also returns the original row norms.
pub fn l2_normalize_with_norms(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    check_finite(x)?;
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= MIN_ROW_NORM {
            return Err(Error::DegenerateRow { row: i, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Shannon entropy (nats) of each row.
pub fn row_entropy(p: &ProbMatrix) -> Vec<f64> {
    p.as_matrix().row_iter().map(entropy).collect()
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| xlogy(x, clamped_ln(x))).sum::<f64>()
}

/// Arithmetic mean of the rows.
pub fn mean_distribution(p: &ProbMatrix) -> Vec<f64> {
    column_means(p.as_matrix())
}

pub(crate) fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (a, &x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    let b = m.rows() as f64;
    mean.iter_mut().for_each(|a| *a /= b);
    mean
}

/// `−p_iᵀ log q_i` for each row. `log_q` is floored at [`LOG_FLOOR`].
pub fn cross_entropy_rows(p: &ProbMatrix, log_q: &Matrix) -> Result<Vec<f64>> {
    p.as_matrix().ensure_same_shape(log_q, "cross_entropy_rows")?;
    if let Some(v) = log_q.data().iter().find(|v| v.is_nan() || **v > 1e-9) {
        return Err(Error::Input(format!("log-probability {v} is positive or NaN")));
    }
    Ok(p.as_matrix()
        .row_iter()
        .zip(log_q.row_iter())
        .map(|(pr, lr)| {
            -pr.iter()
                .zip(lr)
                .map(|(&x, &l)| xlogy(x, l.max(LOG_FLOOR)))
                .sum::<f64>()
        })
        .collect())
}

/// Sinkhorn-Knopp normalization of `exp(logits / epsilon)`.
///
/// Each iteration rescales columns to sum `B/K`, then rows to sum 1, so the
/// output always ends on a row pass. Each column is shifted by its maximum
/// before exponentiation; the column pass absorbs that shift exactly.
pub fn sinkhorn_normalize(logits: &Matrix, iterations: usize, epsilon: f64) -> Result<ProbMatrix> {
    if iterations == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!(
            "sinkhorn epsilon must be positive, got {epsilon}"
        )));
    }
    check_finite(logits)?;
    let (b, k) = logits.shape();
    let col_max: Vec<f64> = (0..k)
        .map(|j| (0..b).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut q = Matrix::from_fn(b, k, |i, j| ((logits[(i, j)] - col_max[j]) / epsilon).exp());
    let col_target = b as f64 / k as f64;
    for _ in 0..iterations {
        let sums = column_sums(&q);
        for i in 0..b {
            for (v, &s) in q.row_mut(i).iter_mut().zip(&sums) {
                if s > 0.0 {
                    *v *= col_target / s;
                }
            }
        }
        normalize_rows_in_place(&mut q);
    }
    Ok(ProbMatrix::from_matrix_unchecked(q))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (a, &x) in s.iter_mut().zip(row) {
            *a += x;
        }
    }
    s
}

fn normalize_rows_in_place(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            let u = 1.0 / row.len() as f64;
            row.iter_mut().for_each(|v| *v = u);
        }
    }
}

/// Softmax over the batch (column) dimension at `temperature`, followed by
/// renormalizing each row to sum 1.
pub fn batch_softmax(logits: &Matrix, temperature: f64) -> Result<ProbMatrix> {
    check_temperature(temperature)?;
    check_finite(logits)?;
    let t = logits.transpose().scale(1.0 / temperature);
    let mut cols = t;
    for j in 0..cols.rows() {
        softmax_in_place(cols.row_mut(j));
    }
    let mut out = cols.transpose();
    normalize_rows_in_place(&mut out);
    Ok(ProbMatrix::from_matrix_unchecked(out))
}

/// Running per-cluster statistics used to standardize logits before the
/// target softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenteringState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the current batch in the EMA update.
    pub momentum: f64,
}

impl CenteringState {
    /// Fresh state for `k` clusters: mean 0, variance 1.
    pub fn new(k: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("momentum must be in (0,1), got {momentum}")));
        }
        Ok(Self {
            running_mean: vec![0.0; k],
            running_var: vec![1.0; k],
            momentum,
        })
    }

    /// EMA update from the batch column statistics (population variance).
    pub fn update(&mut self, logits: &Matrix) -> Result<()> {
        self.check_width(logits)?;
        let mean = column_means(logits);
        let b = logits.rows() as f64;
        let mut var = vec![0.0; logits.cols()];
        for row in logits.row_iter() {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mo = self.momentum;
        for j in 0..mean.len() {
            self.running_mean[j] = (1.0 - mo) * self.running_mean[j] + mo * mean[j];
            self.running_var[j] = (1.0 - mo) * self.running_var[j] + mo * var[j] / b;
        }
        Ok(())
    }

    fn check_width(&self, logits: &Matrix) -> Result<()> {
        if logits.cols() != self.running_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "centering state has {} clusters, logits have {}",
                self.running_mean.len(),
                logits.cols()
            )));
        }
        Ok(())
    }
}

/// Standardizes each logit column with the running statistics, then applies
/// a row softmax at `temperature`. With `update`, the statistics absorb the
/// current batch first.
pub fn centering_transform(
    logits: &Matrix,
    state: &mut CenteringState,
    temperature: f64,
    update: bool,
) -> Result<ProbMatrix> {
    check_temperature(temperature)?;
    check_finite(logits)?;
    state.check_width(logits)?;
    if update {
        state.update(logits)?;
    }
    let standardized = standardize(logits, state);
    softmax_rows(&standardized, temperature)
}

pub(crate) fn standardize(logits: &Matrix, state: &CenteringState) -> Matrix {
    Matrix::from_fn(logits.rows(), logits.cols(), |i, j| {
        (logits[(i, j)] - state.running_mean[j]) / (state.running_var[j] + CENTERING_EPS).sqrt()
    })
}
