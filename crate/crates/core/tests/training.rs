use fusionet_core::data::{stratify, SynthSpec};
use fusionet_core::experiment::ExperimentConfig;
use fusionet_core::fusion::model::{Model, ModelConfig};
use fusionet_core::fusion::train::{train, TrainConfig};
use fusionet_core::fusion::FusionMode;
use fusionet_core::Error;

fn separable() -> (ModelConfig, SynthSpec) {
    let spec = SynthSpec {
        classes: 2,
        samples_per_class: 20,
        image_dims: [4, 4, 2],
        image_noise: 0.0,
        vocab_size: 24,
        text_overlap: 0.0,
        text_dropout: 0.0,
        signal_rate: 1.0,
        ..Default::default()
    };
    let cfg = ExperimentConfig {
        synth: spec.clone(),
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let mut model = cfg.model_config(FusionMode::Dynamic);
    model.fusion.feature_dim = 8;
    (model, spec)
}

#[test]
fn separable_data_is_fit_exactly_in_dynamic_mode() {
    let (cfg, spec) = separable();
    let data = spec.generate().unwrap();
    let mut model = Model::init(cfg, 1).unwrap();
    let report = train(
        &mut model,
        &data.train,
        &TrainConfig {
            max_epochs: 200,
            batch_size: None,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.epochs_run() <= 200);
    assert_eq!(report.final_train_accuracy(), 1.0);
    assert_eq!(model.evaluate(&data.train, 1).unwrap().accuracy, 1.0);
}

#[test]
fn loss_trace_decreases_overall() {
    let (cfg, spec) = separable();
    let data = spec.generate().unwrap();
    let mut model = Model::init(cfg, 2).unwrap();
    let r = train(
        &mut model,
        &data.train,
        &TrainConfig {
            max_epochs: 20,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(r.final_loss() < r.trace[0].mean_loss);
    assert_eq!(r.to_csv().lines().count(), r.epochs_run() + 1);
}

#[test]
fn epsilon_stops_training_early() {
    let (mut cfg, spec) = separable();
    cfg.fusion.mode = FusionMode::Early;
    let data = spec.generate().unwrap();
    let mut model = Model::init(cfg, 3).unwrap();
    let r = train(
        &mut model,
        &data.train,
        &TrainConfig {
            max_epochs: 500,
            epsilon: 0.05,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(r.converged);
    assert!(r.epochs_run() < 500);
    assert!(r.final_loss() <= 0.05);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (cfg, spec) = separable();
    let data = spec.generate().unwrap();
    let mut model = Model::init(cfg.clone(), 4).unwrap();
    train(
        &mut model,
        &data.train,
        &TrainConfig {
            max_epochs: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fusn");
    model.params().save(&path).unwrap();
    let back = Model::from_params(cfg, fusionet_core::encoders::ParamSet::load(&path).unwrap()).unwrap();
    assert_eq!(back.probabilities(&data.test).unwrap(), model.probabilities(&data.test).unwrap());
}

#[test]
fn checkpoint_from_another_mode_is_rejected() {
    let (cfg, _) = separable();
    let early = Model::init(
        ModelConfig {
            fusion: fusionet_core::fusion::FusionConfig {
                mode: FusionMode::Early,
                ..cfg.fusion.clone()
            },
            ..cfg.clone()
        },
        0,
    )
    .unwrap();
    let err = Model::from_params(cfg, early.params().clone()).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch { .. }), "{err}");
}

#[test]
fn stratifying_a_trained_report_partitions_classes() {
    let cfg = ExperimentConfig {
        synth: SynthSpec {
            classes: 6,
            samples_per_class: 12,
            image_dims: [4, 4, 2],
            vocab_size: 40,
            ..Default::default()
        },
        ..Default::default()
    }
    .resolve()
    .unwrap();
    let data = cfg.dataset(0).unwrap();
    let model = Model::init(cfg.model_config(FusionMode::Late), 0).unwrap();
    let report = model.evaluate(&data.test, 2).unwrap();
    let g = stratify(&report, (0.15, 0.68)).unwrap();
    let mut all: Vec<usize> = g.groups().iter().flat_map(|x| x.classes.clone()).collect();
    all.sort();
    assert_eq!(all, (0..6).collect::<Vec<_>>());
}
