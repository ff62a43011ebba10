//! Loss composed with the full dual-encoder forward pass, checked against
//! central differences over every parameter.

use nclip::model::{DualEncoder, EncoderConfig, HeadConfig, HeadVariant, Mode, ModelConfig};
use nclip::objectives::TransformKindName;
use nclip::rng;
use nclip::training::{Objective, ObjectiveConfig, ObjectiveKind};
use nclip::Matrix;

const B: usize = 4;
const STEP: f64 = 1e-5;

fn desk_config(variant: HeadVariant) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            img_input_dim: 12,
            txt_input_dim: 10,
            widths: vec![16, 16],
            shared_trunk: false,
        },
        clip_head: HeadConfig {
            output_dim: 16,
            ..HeadConfig::clip_default()
        },
        nclip_head: HeadConfig {
            hidden_dim: 16,
            output_dim: 32,
            variant,
            ..HeadConfig::nclip_default()
        },
        share_heads: false,
    }
}

fn loss(model: &DualEncoder, objective: &ObjectiveConfig, img: &Matrix, txt: &Matrix) -> f64 {
    let k = model.config().nclip_head.output_dim;
    let mut obj = Objective::new(objective, k).unwrap();
    let fwd = model.forward_batch(img, txt, Mode::Train).unwrap();
    obj.evaluate(&fwd, model.temperature(), 1.0).unwrap().loss.value
}

fn analytic(model: &DualEncoder, objective: &ObjectiveConfig, img: &Matrix, txt: &Matrix) -> Vec<Matrix> {
    let k = model.config().nclip_head.output_dim;
    let mut obj = Objective::new(objective, k).unwrap();
    let fwd = model.forward_batch(img, txt, Mode::Train).unwrap();
    let ev = obj.evaluate(&fwd, model.temperature(), 1.0).unwrap();
    let g = &ev.loss.grads;
    let mut grads = model.backward_batch(&fwd.cache, &g[0], &g[1], &g[2], &g[3]).unwrap();
    if ev.uses_temperature {
        grads[model.temperature_index()] = Matrix::filled(1, 1, ev.loss.temp_grad);
    }
    grads
}

/// `max |analytic − numeric| / (max |numeric| + 1e-12)` over all parameters.
fn relative_error(config: &ModelConfig, objective: &ObjectiveConfig, seed: u64) -> f64 {
    let model = DualEncoder::init(config, seed).unwrap();
    let mut r = rng::stream(seed, 99);
    let img = rng::normal_matrix(&mut r, B, config.encoder.img_input_dim, 1.0);
    let txt = rng::normal_matrix(&mut r, B, config.encoder.txt_input_dim, 1.0);
    let grads = analytic(&model, objective, &img, &txt);
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (p, g) in grads.iter().enumerate() {
        for idx in 0..g.data().len() {
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[idx] += STEP;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[idx] -= STEP;
            let numeric = (loss(&plus, objective, &img, &txt) - loss(&minus, objective, &img, &txt)) / (2.0 * STEP);
            worst = worst.max((numeric - g.data()[idx]).abs());
            scale = scale.max(numeric.abs());
        }
    }
    worst / (scale + 1e-12)
}

#[test]
fn every_objective_backpropagates_through_the_encoder() {
    for kind in [
        ObjectiveKind::Clip,
        ObjectiveKind::Nclip,
        ObjectiveKind::Xclip,
        ObjectiveKind::Unified,
        ObjectiveKind::SharedLatent,
    ] {
        // stop-gradient targets would need frozen-target differences; identity is fully differentiable
        let objective = ObjectiveConfig {
            kind,
            transform: TransformKindName::Identity,
            target_temperature: Some(0.7),
            ..ObjectiveConfig::default()
        };
        let err = relative_error(&desk_config(HeadVariant::Vanilla), &objective, 3);
        assert!(err < 1e-3, "{kind:?}: relative error {err}");
    }
}

#[test]
fn head_variants_backpropagate() {
    let objective = ObjectiveConfig::default();
    for variant in [HeadVariant::Bottleneck, HeadVariant::L2norm, HeadVariant::NoLastBn] {
        let err = relative_error(&desk_config(variant), &objective, 5);
        assert!(err < 1e-3, "{variant:?}: relative error {err}");
    }
}

#[test]
fn shared_trunk_and_heads_accumulate_both_modalities() {
    let mut config = desk_config(HeadVariant::Vanilla);
    config.encoder.txt_input_dim = config.encoder.img_input_dim;
    config.encoder.shared_trunk = true;
    config.share_heads = true;
    config.nclip_head.total_hidden_layers = 2;
    config.nclip_head.shared_hidden_layers = 1;
    let err = relative_error(&config, &ObjectiveConfig::default(), 7);
    assert!(err < 1e-3, "relative error {err}");
}
