//! Small-world collapse run: without the sharpness term the non-contrastive
//! assignments settle on one constant uniform distribution.

use nclip::data::{generate_synthetic, ConceptWorld};
use nclip::training::{collapse_verdict, CollapseKind, ObjectiveKind, TrainConfig, Trainer};

#[test]
fn smoothness_only_collapses_to_constant_uniform() {
    let world = ConceptWorld {
        num_concepts: 8,
        noise_scale: 0.5,
        ..ConceptWorld::default()
    };
    let ds = generate_synthetic(&world, 0).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.objective.kind = ObjectiveKind::Nclip;
    cfg.objective.lambda1 = 0.0;
    cfg.objective.lambda2 = 1.0;
    cfg.model.nclip_head.output_dim = 32;
    // 500 steps cut from a longer schedule; collapse speed tracks the learning rate
    cfg.schedule.total_epochs = 20;
    cfg.schedule.warmup_epochs = 1;
    let mut trainer = Trainer::new(&cfg, &ds).unwrap();
    let mut last = None;
    while trainer.step < 500 {
        trainer
            .run_epoch(&ds, |s| {
                last = Some(s.clone());
                Ok(())
            })
            .unwrap();
    }
    let last = last.unwrap();
    assert_eq!(last.step, 499);
    assert!(last.row_std < 1e-3, "row_std {}", last.row_std);
    assert_eq!(collapse_verdict(&last, 32), CollapseKind::ConstantUniform);
}
