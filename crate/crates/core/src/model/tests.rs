use super::*;
use crate::rng::{normal_matrix, stream};

fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            img_input_dim: 6,
            txt_input_dim: 5,
            widths: vec![8, 8],
            shared_trunk: false,
        },
        clip_head: HeadConfig {
            output_dim: 4,
            ..HeadConfig::clip_default()
        },
        nclip_head: HeadConfig {
            hidden_dim: 10,
            output_dim: 12,
            ..HeadConfig::nclip_default()
        },
        share_heads: false,
    }
}

fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> (Matrix, Matrix) {
    let mut r = stream(seed, 99);
    (
        normal_matrix(&mut r, b, cfg.encoder.img_input_dim, 1.0),
        normal_matrix(&mut r, b, cfg.encoder.txt_input_dim, 1.0),
    )
}

#[test]
fn init_is_deterministic() {
    let a = DualEncoder::init(&toy_config(), 0).unwrap();
    let b = DualEncoder::init(&toy_config(), 0).unwrap();
    let bits = |m: &DualEncoder| -> Vec<u64> {
        m.params()
            .iter()
            .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&DualEncoder::init(&toy_config(), 1).unwrap()));
    assert!((a.temperature().value() - 0.07).abs() < 1e-15);
}

#[test]
fn weight_scale_follows_fan_in() {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            img_input_dim: 100,
            txt_input_dim: 100,
            widths: vec![100],
            shared_trunk: false,
        },
        ..ModelConfig::default()
    };
    let m = DualEncoder::init(&cfg, 3).unwrap();
    let w = &m.params()[m.param_index("img.trunk.0.w").unwrap()];
    assert_eq!(w.data().len(), 10_000);
    let n = w.data().len() as f64;
    let mean = w.sum() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.1).abs() < 0.02, "{std}");
    let b = &m.params()[m.param_index("img.trunk.0.b").unwrap()];
    assert_eq!(b.max_abs(), 0.0);
}

#[test]
fn config_validation() {
    let mut cfg = toy_config();
    cfg.encoder.widths.clear();
    assert!(matches!(DualEncoder::init(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = toy_config();
    cfg.encoder.shared_trunk = true;
    assert!(DualEncoder::init(&cfg, 0).is_err());
    let mut cfg = toy_config();
    cfg.nclip_head.shared_hidden_layers = 2;
    assert!(DualEncoder::init(&cfg, 0).is_err());
    let mut cfg = toy_config();
    cfg.nclip_head.output_dim = 1;
    assert!(DualEncoder::init(&cfg, 0).is_err());
}

#[test]
fn train_mode_standardizes_h() {
    // output variance is v / (v + eps): the 1e-4 band needs pre-standardization variance above 0.1
    let cfg = ModelConfig::default();
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, y) = batch(&cfg, 64, 1);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    for h in [&out.img.h, &out.txt.h] {
        for j in 0..h.cols() {
            let c = h.column(j);
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }
}

#[test]
fn single_row_train_batch_is_rejected() {
    let cfg = toy_config();
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, y) = batch(&cfg, 1, 1);
    assert!(matches!(
        m.forward_batch(&x, &y, Mode::Train),
        Err(Error::Precondition(_))
    ));
    assert!(m.forward_batch(&x, &y, Mode::Eval).is_ok());
}

#[test]
fn duplicated_rows_give_duplicated_g() {
    let cfg = toy_config();
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, y) = batch(&cfg, 4, 2);
    let x = x.select_rows(&[0, 1, 0, 3]);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    assert_eq!(out.img.g.row(0), out.img.g.row(2));
}

#[test]
fn eval_mode_head_is_affine() {
    let mut cfg = toy_config();
    cfg.encoder.widths = vec![8];
    cfg.nclip_head.total_hidden_layers = 0;
    let mut m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, y) = batch(&cfg, 16, 3);
    for _ in 0..3 {
        let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
        m.update_running_stats(&out.cache).unwrap();
    }
    let t = 0.37;
    let x3 = Matrix::from_fn(3, x.cols(), |i, j| match i {
        0 => x[(0, j)],
        1 => x[(1, j)],
        _ => x[(0, j)] + t * (x[(1, j)] - x[(0, j)]),
    });
    let h = m.encode(Modality::Image, &x3, Mode::Eval).unwrap().h;
    for j in 0..h.cols() {
        let expect = h[(0, j)] + t * (h[(1, j)] - h[(0, j)]);
        assert!((h[(2, j)] - expect).abs() < 1e-6);
    }
}

#[test]
fn shared_trunk_and_heads() {
    let mut cfg = toy_config();
    cfg.encoder.txt_input_dim = 6;
    cfg.encoder.shared_trunk = true;
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, _) = batch(&cfg, 4, 4);
    let out = m.forward_batch(&x, &x, Mode::Train).unwrap();
    assert_eq!(out.img.f, out.txt.f);
    assert_ne!(out.img.g, out.txt.g);

    cfg.share_heads = true;
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let out = m.forward_batch(&x, &x, Mode::Train).unwrap();
    assert_eq!(out.img.g, out.txt.g);
    assert_eq!(out.img.h, out.txt.h);
}

fn linear_loss_grads(m: &DualEncoder, x: &Matrix, y: &Matrix, scale: f64) -> Vec<Matrix> {
    let out = m.forward_batch(x, y, Mode::Train).unwrap();
    let mut r = stream(5, 5);
    let mut up = |a: &Matrix| normal_matrix(&mut r, a.rows(), a.cols(), scale);
    let (a, b, c, d) = (up(&out.img.g), up(&out.txt.g), up(&out.img.h), up(&out.txt.h));
    m.backward_batch(&out.cache, &a, &b, &c, &d).unwrap()
}

#[test]
fn backward_is_linear_in_upstream() {
    let cfg = toy_config();
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, y) = batch(&cfg, 4, 6);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    let z = |a: &Matrix| Matrix::zeros(a.rows(), a.cols());
    let g = m
        .backward_batch(
            &out.cache,
            &z(&out.img.g),
            &z(&out.txt.g),
            &z(&out.img.h),
            &z(&out.txt.h),
        )
        .unwrap();
    assert!(g.iter().all(|g| g.max_abs() == 0.0));

    let g1 = linear_loss_grads(&m, &x, &y, 1.0);
    let g2 = linear_loss_grads(&m, &x, &y, 2.0);
    for (a, b) in g1.iter().zip(&g2) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn stale_cache_is_rejected() {
    let cfg = toy_config();
    let mut m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, y) = batch(&cfg, 4, 6);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    m.params_mut()[0].data_mut()[0] += 1.0;
    let z = |a: &Matrix| Matrix::zeros(a.rows(), a.cols());
    let r = m.backward_batch(
        &out.cache,
        &z(&out.img.g),
        &z(&out.txt.g),
        &z(&out.img.h),
        &z(&out.txt.h),
    );
    assert!(matches!(r, Err(Error::Precondition(_))));
}

/// Central differences over every parameter of `Σ C ⊙ outputs`.
fn parameter_fd_error(cfg: &ModelConfig, b: usize) -> f64 {
    let mut m = DualEncoder::init(cfg, 7).unwrap();
    let (x, y) = batch(cfg, b, 8);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    let mut r = stream(9, 9);
    let ups: Vec<Matrix> = [&out.img.g, &out.txt.g, &out.img.h, &out.txt.h]
        .iter()
        .map(|a| normal_matrix(&mut r, a.rows(), a.cols(), 1.0))
        .collect();
    let analytic = m
        .backward_batch(&out.cache, &ups[0], &ups[1], &ups[2], &ups[3])
        .unwrap();
    let value = |m: &DualEncoder| -> f64 {
        let o = m.forward_batch(&x, &y, Mode::Train).unwrap();
        [&o.img.g, &o.txt.g, &o.img.h, &o.txt.h]
            .iter()
            .zip(&ups)
            .map(|(a, c)| a.data().iter().zip(c.data()).map(|(u, v)| u * v).sum::<f64>())
            .sum()
    };
    let step = 1e-5;
    let (mut max_diff, mut max_num) = (0.0f64, 0.0f64);
    #[allow(clippy::needless_range_loop)]
    for p in 0..m.params().len() {
        for k in 0..m.params()[p].data().len() {
            let orig = m.params()[p].data()[k];
            m.params_mut()[p].data_mut()[k] = orig + step;
            let plus = value(&m);
            m.params_mut()[p].data_mut()[k] = orig - step;
            let minus = value(&m);
            m.params_mut()[p].data_mut()[k] = orig;
            let num = (plus - minus) / (2.0 * step);
            max_diff = max_diff.max((num - analytic[p].data()[k]).abs());
            max_num = max_num.max(num.abs());
        }
    }
    max_diff / (max_num + 1e-12)
}

#[test]
fn parameter_gradients_match_central_differences() {
    assert!(parameter_fd_error(&toy_config(), 4) < 1e-3);
}

#[test]
fn parameter_gradients_for_head_variants() {
    for variant in [HeadVariant::Bottleneck, HeadVariant::L2norm, HeadVariant::NoLastBn] {
        let mut cfg = toy_config();
        cfg.nclip_head.variant = variant;
        cfg.nclip_head.total_hidden_layers = 2;
        cfg.nclip_head.shared_hidden_layers = 1;
        let e = parameter_fd_error(&cfg, 4);
        assert!(e < 1e-3, "{variant:?}: {e}");
    }
}

#[test]
fn no_last_bn_differs_only_after_final_linear() {
    let mut cfg = toy_config();
    let vanilla = DualEncoder::init(&cfg, 0).unwrap();
    cfg.nclip_head.variant = HeadVariant::NoLastBn;
    let plain = DualEncoder::init(&cfg, 0).unwrap();
    assert_eq!(vanilla.params(), plain.params());
    let (x, _) = batch(&cfg, 8, 1);
    let tv = vanilla.nclip_trace(Modality::Image, &x, Mode::Train).unwrap();
    let tp = plain.nclip_trace(Modality::Image, &x, Mode::Train).unwrap();
    assert_eq!(tv.len(), tp.len() + 1);
    assert_eq!(tv[..tp.len()], tp[..]);
}

#[test]
fn l2norm_variant_normalizes_before_final_linear() {
    let mut cfg = toy_config();
    cfg.nclip_head.variant = HeadVariant::L2norm;
    let m = DualEncoder::init(&cfg, 0).unwrap();
    let (x, _) = batch(&cfg, 8, 1);
    let trace = m.nclip_trace(Modality::Image, &x, Mode::Train).unwrap();
    let pre_final = &trace[trace.len() - 3];
    for r in pre_final.row_iter() {
        let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bottleneck_has_fewer_parameters_for_wide_outputs() {
    let mut cfg = ModelConfig::default();
    cfg.nclip_head.output_dim = 1024;
    let vanilla = DualEncoder::init(&cfg, 0).unwrap().num_parameters();
    cfg.nclip_head.variant = HeadVariant::Bottleneck;
    let m = DualEncoder::init(&cfg, 0).unwrap();
    assert!(m.num_parameters() < vanilla);
    let w = &m.params()[m.param_index("img.nclip.bottleneck.w").unwrap()];
    assert_eq!(w.cols(), 8);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = toy_config();
    let mut m = DualEncoder::init(&cfg, 11).unwrap();
    let (x, y) = batch(&cfg, 8, 1);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    m.update_running_stats(&out.cache).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = DualEncoder::load(&path).unwrap();
    assert_eq!(back, m);
    for (a, b) in back.params().iter().zip(m.params()) {
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let e1 = m.encode(Modality::Text, &y, Mode::Eval).unwrap();
    let e2 = back.encode(Modality::Text, &y, Mode::Eval).unwrap();
    assert_eq!(e1, e2);

    let mut ck = m.to_checkpoint();
    ck.version = 9;
    assert!(matches!(DualEncoder::from_checkpoint(ck), Err(Error::Version { .. })));
    let mut ck = m.to_checkpoint();
    ck.params.pop();
    assert!(DualEncoder::from_checkpoint(ck).is_err());
}

#[test]
fn running_stats_move_towards_batch_stats() {
    let cfg = toy_config();
    let mut m = DualEncoder::init(&cfg, 0).unwrap();
    let before = m.running_stats().to_vec();
    let (x, y) = batch(&cfg, 8, 1);
    let out = m.forward_batch(&x, &y, Mode::Train).unwrap();
    m.update_running_stats(&out.cache).unwrap();
    assert_ne!(before, m.running_stats());
    let eval = m.forward_batch(&x, &y, Mode::Eval).unwrap();
    assert!(m.update_running_stats(&eval.cache).is_err());
}
