use nclip::data::{generate_heldout, ConceptWorld};
use nclip::evaluation::{linear_probe, similarity_matrix, zeroshot_classify, ProbeOptions, SimilarityMetric};
use nclip::model::{DualEncoder, ModelConfig};
use nclip::rng;
use nclip::Matrix;
use rand::seq::SliceRandom;

/// `|acc − p| ≤ 3·sqrt(p(1−p)/n)`.
fn within_three_sigma(acc: f64, p: f64, n: usize) -> bool {
    (acc - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn untrained_encoders_classify_at_chance() {
    // one independent initialization per image keeps the trials independent
    let world = ConceptWorld::default();
    let n = 1024;
    let held = generate_heldout(&world, 0, n).unwrap();
    let class_texts = world.prototypes(0).text;
    let config = ModelConfig::default();
    let mut hits = 0.0;
    for i in 0..n {
        let model = DualEncoder::init(&config, 1000 + i as u64).unwrap();
        let image = held.images.select_rows(&[i]);
        let label = held.labels[i] as usize;
        hits += zeroshot_classify(&model, &class_texts, &image, &[label], SimilarityMetric::Cosine, true).unwrap();
    }
    let acc = hits / n as f64;
    let chance = 1.0 / world.num_concepts as f64;
    assert!(within_three_sigma(acc, chance, n), "accuracy {acc} vs chance {chance}");
}

#[test]
fn shuffled_labels_probe_at_chance() {
    let classes = 4;
    let (n_train, n_test, dim) = (1024, 2000, 8);
    let mut r = rng::stream(5, 0);
    let x = rng::normal_matrix(&mut r, n_train + n_test, dim, 1.0);
    // labels are a deterministic function of the features, then shuffled
    let mut labels: Vec<usize> = x
        .row_iter()
        .map(|row| usize::from(row[0] > 0.0) + 2 * usize::from(row[1] > 0.0))
        .collect();
    labels.shuffle(&mut r);
    let idx_train: Vec<usize> = (0..n_train).collect();
    let idx_test: Vec<usize> = (n_train..n_train + n_test).collect();
    let opts = ProbeOptions {
        epochs: 20,
        lr_multipliers: vec![0.1],
        ..ProbeOptions::default()
    };
    let res = linear_probe(
        &x.select_rows(&idx_train),
        &labels[..n_train],
        &x.select_rows(&idx_test),
        &labels[n_train..],
        &opts,
    )
    .unwrap();
    let chance = 1.0 / classes as f64;
    assert!(
        within_three_sigma(res.best_accuracy, chance, n_test),
        "accuracy {}",
        res.best_accuracy
    );
}

#[test]
fn unshuffled_labels_are_learnable() {
    let (n, dim) = (1200, 8);
    let mut r = rng::stream(6, 0);
    let x = rng::normal_matrix(&mut r, n, dim, 1.0);
    let labels: Vec<usize> = x
        .row_iter()
        .map(|row| usize::from(row[0] + 0.5 * row[3] > 0.0))
        .collect();
    let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 3 != 0);
    let y = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let res = linear_probe(
        &x.select_rows(&train),
        &y(&train),
        &x.select_rows(&test),
        &y(&test),
        &ProbeOptions::default(),
    )
    .unwrap();
    assert!(res.best_accuracy > 0.95, "accuracy {}", res.best_accuracy);
}

#[test]
fn cosine_similarity_ignores_positive_rescaling() {
    let mut r = rng::stream(8, 0);
    let a = rng::normal_matrix(&mut r, 6, 5, 1.0);
    let b = rng::normal_matrix(&mut r, 7, 5, 1.0);
    let scales: Vec<f64> = (0..6).map(|i| 0.01 + 3.0 * i as f64).collect();
    let a_scaled = Matrix::from_fn(6, 5, |i, j| a[(i, j)] * scales[i]);
    let s = similarity_matrix(&a, &b, SimilarityMetric::Cosine, true).unwrap();
    let t = similarity_matrix(&a_scaled, &b.scale(250.0), SimilarityMetric::Cosine, true).unwrap();
    assert!(s.zip_map(&t, |u, v| u - v).max_abs() < 1e-9);
}
