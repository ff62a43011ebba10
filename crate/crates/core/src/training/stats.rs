use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::numerics::{cross_entropy_rows, entropy, mean_distribution, row_entropy, ProbMatrix};

/// Per-step training diagnostics. Field order is the metrics-log schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub l_ce: f64,
    pub l_eh: f64,
    pub l_he: f64,
    /// `l_ce − l_eh`.
    pub l_kl: f64,
    /// Contrastive loss, when the objective has a contrastive term.
    pub l_clip: Option<f64>,
    pub acc_c: f64,
    pub acc_nc: f64,
    pub row_std: f64,
    pub row_std_img: f64,
    pub row_std_txt: f64,
    pub column_std: f64,
    pub column_std_img: f64,
    pub column_std_txt: f64,
    pub lr: f64,
    pub sigma: f64,
}

impl BatchStats {
    /// Column names in schema order.
    pub const FIELDS: [&'static str; 18] = [
        "step",
        "epoch",
        "loss",
        "l_ce",
        "l_eh",
        "l_he",
        "l_kl",
        "l_clip",
        "acc_c",
        "acc_nc",
        "row_std",
        "row_std_img",
        "row_std_txt",
        "column_std",
        "column_std_img",
        "column_std_txt",
        "lr",
        "sigma",
    ];
}

fn std_of(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Mean over rows of the within-row standard deviation.
pub fn row_std(p: &ProbMatrix) -> f64 {
    let m = p.as_matrix();
    m.row_iter().map(|r| std_of(r.iter().copied())).sum::<f64>() / m.rows() as f64
}

/// Mean over columns of the across-batch standard deviation.
pub fn column_std(p: &ProbMatrix) -> f64 {
    let m = p.as_matrix();
    (0..m.cols())
        .map(|j| std_of((0..m.rows()).map(|i| m[(i, j)])))
        .sum::<f64>()
        / m.cols() as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapse statistics of one step. Step, epoch, loss, lr and σ are left at
/// zero for the caller.
pub fn compute_batch_stats(p_img: &ProbMatrix, p_txt: &ProbMatrix, sim: &Matrix, l_clip: Option<f64>) -> BatchStats {
    let b = p_img.rows() as f64;
    let ce = |p: &ProbMatrix, q: &ProbMatrix| {
        cross_entropy_rows(p, &q.log())
            .expect("matching shapes")
            .iter()
            .sum::<f64>()
            / b
    };
    let l_ce = 0.5 * (ce(p_img, p_txt) + ce(p_txt, p_img));
    let mean_h = |p: &ProbMatrix| row_entropy(p).iter().sum::<f64>() / b;
    let l_eh = 0.5 * (mean_h(p_img) + mean_h(p_txt));
    let l_he = 0.5 * (entropy(&mean_distribution(p_img)) + entropy(&mean_distribution(p_txt)));
    let acc_c = (0..sim.rows()).filter(|&i| argmax(sim.row(i)) == i).count() as f64 / sim.rows() as f64;
    let acc_nc = (0..p_img.rows())
        .filter(|&i| argmax(p_img.row(i)) == argmax(p_txt.row(i)))
        .count() as f64
        / b;
    let (ri, rt) = (row_std(p_img), row_std(p_txt));
    let (ci, ct) = (column_std(p_img), column_std(p_txt));
    BatchStats {
        l_ce,
        l_eh,
        l_he,
        l_kl: l_ce - l_eh,
        l_clip,
        acc_c,
        acc_nc,
        row_std: 0.5 * (ri + rt),
        row_std_img: ri,
        row_std_txt: rt,
        column_std: 0.5 * (ci + ct),
        column_std_img: ci,
        column_std_txt: ct,
        ..BatchStats::default()
    }
}
