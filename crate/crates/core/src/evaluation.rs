//! Zero-shot classification, bidirectional recall@K and linear probing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PairDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{DualEncoder, Modality, Mode};
use crate::numerics::{l2_normalize_rows, softmax_rows, ProbMatrix};
use crate::rng;
use crate::training::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// Cosine between contrastive-head outputs.
    Cosine,
    /// Negative cross-entropy between non-contrastive assignments.
    NegCe,
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "neg_ce" => Ok(Self::NegCe),
            other => Err(Error::Config(format!(
                "unknown metric '{other}' (expected cosine or neg_ce)"
            ))),
        }
    }
}

/// `cos(a_i, b_j)` for every pair of rows.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "feature widths {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(l2_normalize_rows(a)?.matmul_t(&l2_normalize_rows(b)?))
}

/// `−CE(p_i, q_j)`, or with `symmetric` the mean of both directions.
pub fn neg_ce_similarity(p: &ProbMatrix, q: &ProbMatrix, symmetric: bool) -> Result<Matrix> {
    if p.cols() != q.cols() {
        return Err(Error::DimensionMismatch(format!(
            "assignment widths {} and {}",
            p.cols(),
            q.cols()
        )));
    }
    let (lp, lq) = (p.log(), q.log());
    let forward = p.as_matrix().matmul_t(&lq);
    if !symmetric {
        return Ok(forward);
    }
    let backward = lp.matmul_t(q.as_matrix());
    Ok(forward.zip_map(&backward, |a, b| 0.5 * (a + b)))
}

/// Similarities between head outputs: cosine on contrastive features,
/// negative cross-entropy on non-contrastive logits (softmax at τ = 1).
pub fn similarity_matrix(img: &Matrix, txt: &Matrix, metric: SimilarityMetric, symmetric: bool) -> Result<Matrix> {
    match metric {
        SimilarityMetric::Cosine => cosine_similarity(img, txt),
        SimilarityMetric::NegCe => neg_ce_similarity(&softmax_rows(img, 1.0)?, &softmax_rows(txt, 1.0)?, symmetric),
    }
}

fn head(e: crate::model::Encoded, metric: SimilarityMetric) -> Matrix {
    match metric {
        SimilarityMetric::Cosine => e.g,
        SimilarityMetric::NegCe => e.h,
    }
}

/// Encodes images and texts in eval mode and compares them with `metric`.
pub fn encode_similarity(
    model: &DualEncoder,
    images: &Matrix,
    texts: &Matrix,
    metric: SimilarityMetric,
    symmetric: bool,
) -> Result<Matrix> {
    let gi = head(model.encode(Modality::Image, images, Mode::Eval)?, metric);
    let gt = head(model.encode(Modality::Text, texts, Mode::Eval)?, metric);
    similarity_matrix(&gi, &gt, metric, symmetric)
}

/// Argmax of each similarity row; ties go to the lowest class index.
pub fn zeroshot_predict(sim: &Matrix) -> Result<Vec<usize>> {
    if sim.cols() == 0 {
        return Err(Error::Input("zero-shot classification needs at least one class".into()));
    }
    Ok(sim.row_iter().map(argmax).collect())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Zero-shot accuracy of `model` classifying `images` against the class text
/// vectors `class_texts` (one row per class).
pub fn zeroshot_classify(
    model: &DualEncoder,
    class_texts: &Matrix,
    images: &Matrix,
    labels: &[usize],
    metric: SimilarityMetric,
    symmetric: bool,
) -> Result<f64> {
    if class_texts.rows() < 2 {
        return Err(Error::Input(format!(
            "zero-shot needs at least 2 classes, got {}",
            class_texts.rows()
        )));
    }
    let sim = encode_similarity(model, images, class_texts, metric, symmetric)?;
    Ok(accuracy(&zeroshot_predict(&sim)?, labels))
}

/// Recall@K for each K in one retrieval direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Rank of `target` in `row`: entries strictly greater, plus equal entries at
/// a lower index.
fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count()
}

/// Recall@K in both directions with ground truth `truth[i]` (text index of
/// image `i`), ties broken by index.
pub fn recall_at_k(sim: &Matrix, truth: &[usize], ks: &[usize]) -> Result<Vec<Recall>> {
    let n = sim.rows();
    if sim.cols() != n || truth.len() != n {
        return Err(Error::DimensionMismatch(
            "retrieval needs a square similarity matrix and one partner per query".into(),
        ));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Parameter(format!("K = {k} outside [1, corpus size {n}]")));
    }
    let mut inverse = vec![0usize; n];
    for (i, &t) in truth.iter().enumerate() {
        inverse[t] = i;
    }
    let st = sim.transpose();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), truth[i])).collect();
    let t2i: Vec<usize> = (0..n).map(|j| rank_of(st.row(j), inverse[j])).collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(ks
        .iter()
        .map(|&k| Recall {
            k,
            image_to_text: frac(&i2t, k),
            text_to_image: frac(&t2i, k),
        })
        .collect())
}

/// Retrieval over matched pairs (`image i ↔ text i`).
pub fn retrieval_recall(
    model: &DualEncoder,
    pairs: &PairDataset,
    ks: &[usize],
    metric: SimilarityMetric,
    symmetric: bool,
) -> Result<Vec<Recall>> {
    let sim = encode_similarity(model, &pairs.images, &pairs.texts, metric, symmetric)?;
    let truth: Vec<usize> = (0..pairs.len()).collect();
    recall_at_k(&sim, &truth, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_multipliers: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 1.0,
            lr_multipliers: vec![0.3, 0.1, 0.03, 0.01],
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub best_accuracy: f64,
    pub best_lr: f64,
    /// `(lr, test accuracy)` for every grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Softmax-regression probe trained by plain minibatch SGD (no momentum, no
/// weight decay) for each learning rate of the grid; reports the best test
/// accuracy.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::DimensionMismatch("probe features and labels disagree".into()));
    }
    let mut distinct = train_y.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Precondition(
            "linear probe needs at least 2 classes in the training split".into(),
        ));
    }
    if opts.lr_multipliers.is_empty() || opts.batch_size == 0 {
        return Err(Error::Config(
            "probe needs a non-empty lr grid and a positive batch size".into(),
        ));
    }
    let classes = train_y.iter().chain(test_y).max().unwrap() + 1;
    let mut grid = Vec::new();
    for &mult in &opts.lr_multipliers {
        let lr = opts.base_lr * mult;
        let (w, b) = fit_softmax(train_x, train_y, classes, lr, opts)?;
        let logits = affine(test_x, &w, &b);
        let pred: Vec<usize> = logits.row_iter().map(argmax).collect();
        grid.push((lr, accuracy(&pred, test_y)));
    }
    let (best_lr, best_accuracy) = grid.iter().copied().fold(
        (f64::NAN, -1.0),
        |best, (lr, a)| if a > best.1 { (lr, a) } else { best },
    );
    Ok(ProbeResult {
        best_accuracy,
        best_lr,
        grid,
    })
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut z = x.matmul(w);
    for i in 0..z.rows() {
        for (v, bv) in z.row_mut(i).iter_mut().zip(b) {
            *v += bv;
        }
    }
    z
}

fn fit_softmax(x: &Matrix, y: &[usize], classes: usize, lr: f64, opts: &ProbeOptions) -> Result<(Matrix, Vec<f64>)> {
    let mut w = Matrix::zeros(x.cols(), classes);
    let mut b = vec![0.0; classes];
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut r = rng::stream(opts.seed, 0xbeef);
    for _ in 0..opts.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(opts.batch_size) {
            let xb = x.select_rows(chunk);
            let p = softmax_rows(&affine(&xb, &w, &b), 1.0)?;
            let mut d = p.into_matrix();
            let n = chunk.len() as f64;
            for (row, &i) in chunk.iter().enumerate() {
                d.row_mut(row)[y[i]] -= 1.0;
            }
            d.scale_in_place(1.0 / n);
            w.add_scaled(&xb.t_matmul(&d), -lr);
            for r in d.row_iter() {
                for (bv, g) in b.iter_mut().zip(r) {
                    *bv -= lr * g;
                }
            }
        }
    }
    if !w.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("linear probe diverged at lr {lr}"),
        });
    }
    Ok((w, b))
}

/// Result document of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: Option<SimilarityMetric>,
    pub values: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
    pub warnings: Vec<String>,
}
