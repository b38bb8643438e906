use mvbrain::atlas::{synth_atlas, AtlasRegistry};
use mvbrain::config::ModelConfig;
use mvbrain::connectome::{synth_generate, Dataset, SignalMode, SynthConfig};
use mvbrain::head::evaluate;
use mvbrain::model::ModelState;
use mvbrain::train::{finetune, pretrain, TrainConfig, TrainState};

fn fixture(per_class: usize, class_effect: f64) -> (AtlasRegistry, Dataset) {
    let reg = AtlasRegistry::from_atlases([
        synth_atlas("A", 12, 1).unwrap(),
        synth_atlas("B", 16, 2).unwrap(),
        synth_atlas("C", 10, 3).unwrap(),
    ])
    .unwrap();
    let cfg = SynthConfig {
        name: "train".into(),
        atlases: vec!["A".into(), "B".into(), "C".into()],
        subjects_per_class: per_class,
        num_classes: 2,
        communities: 4,
        within: 0.5,
        between: 0.1,
        noise: 0.2,
        class_effect,
        center_jitter: 8.0,
        latent_modes: 4,
        signal: SignalMode::Shared,
    };
    let ds = synth_generate(&cfg, 5, &reg).unwrap();
    (reg, ds)
}

fn model(reg: &AtlasRegistry, ids: &[&str]) -> ModelState {
    let atlases: Vec<_> = ids.iter().map(|id| reg.require(id).unwrap()).collect();
    ModelState::new(ModelConfig::toy(), atlases, 5).unwrap()
}

#[test]
fn twenty_epoch_pretraining_lowers_the_epoch_mean_loss() {
    let (reg, ds) = fixture(8, 0.3);
    let ds = ds.restrict_atlases(&["A", "B"]);
    let mut state = TrainState::new(model(&reg, &["A", "B"]), Default::default());
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::pretrain(5)
    };
    let mut reports = Vec::new();
    pretrain(&mut state, &[&ds], &reg, &cfg, None, &mut |r| reports.push(r.clone())).unwrap();
    assert_eq!(reports.len(), 20);
    assert!(reports.iter().all(|r| r.loss_cc.is_some() && r.loss_rec.is_some()));
    let (first, last) = (reports[0].loss_total, reports[19].loss_total);
    assert!(last < first, "epoch 1 {first}, epoch 20 {last}");
}

#[test]
fn finetuning_fits_a_tiny_two_class_set() {
    let (reg, ds) = fixture(10, 0.4);
    let subset = vec!["A".to_string(), "B".to_string()];
    let cfg = TrainConfig {
        val_fraction: 0.0,
        batch_size: 4,
        ..TrainConfig::finetune(5)
    };
    let out = finetune(model(&reg, &["A", "B"]), &ds, &reg, &subset, &cfg).unwrap();
    assert_eq!(out.n_train, 20);
    let report = evaluate(&out.model, &ds, &subset, &reg).unwrap();
    assert!(report.accuracy >= 0.95, "train accuracy {}", report.accuracy);
}

#[test]
fn unseen_atlas_gets_a_fresh_projection() {
    let (reg, ds) = fixture(6, 0.4);
    let base = model(&reg, &["A", "B"]);
    assert!(!base.projection_ids().any(|id| id == "C"));
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 4,
        ..TrainConfig::finetune(5)
    };
    let out = finetune(base, &ds, &reg, &["C".to_string()], &cfg).unwrap();
    assert!(out.model.projection_ids().any(|id| id == "C"));
    assert_eq!(out.history.len(), 3);
}
