use webly_core::dataset::{load_dataset, save_dataset, SynthConfig};
use webly_core::eval::{evaluate_model, prepare_synth_experiment, run_method, top_k_retrieval, Method, TestSplit};
use webly_core::models::{load_model, save_model, AdamConfig};
use webly_core::pseudolabel::label_dataset;
use webly_core::training::{train_mmco, CheckpointWriter, Hooks, TrainConfig, TrainingData};
use webly_core::{Error, ErrorClass, VotingScheme};

fn small() -> SynthConfig {
    SynthConfig {
        n_classes: 3,
        n_per_class: 80,
        n_background: 200,
        modality_dims: vec![6, 6, 4],
        noise_level: 0.3,
        hard_fraction: 0.3,
        class_separation: 2.5,
        train_only_modalities: 1,
        seed: 11,
    }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 32,
        train_modalities: ["m0", "m1", "m2", "concat"].map(String::from).to_vec(),
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn saved_dataset_trains_like_the_original() {
    let exp = prepare_synth_experiment(&small(), &TestSplit::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&exp.train, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();

    let a = train_mmco(&TrainingData::new(&exp.train).unwrap(), &cfg(), Hooks::default()).unwrap();
    let b = train_mmco(&TrainingData::new(&loaded).unwrap(), &cfg(), Hooks::default()).unwrap();
    assert_eq!(a.reports, b.reports);
}

#[test]
fn text_matching_reproduces_generated_labels() {
    let exp = prepare_synth_experiment(&small(), &TestSplit::default()).unwrap();
    let relabeled = label_dataset(&exp.train, &exp.train.class_names).unwrap();
    assert_eq!(&relabeled, exp.train.labels.as_ref().unwrap());
}

#[test]
fn checkpoint_evaluates_like_the_in_run_model() {
    let exp = prepare_synth_experiment(&small(), &TestSplit::default()).unwrap();
    let c = TrainConfig { epochs: 30, ..cfg() };
    let run = run_method(&exp.train, &exp.test, &c, Method::Mmco).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("concat.model");
    save_model(
        &run.outcome.state.export("concat", &exp.train.class_names).unwrap(),
        &path,
    )
    .unwrap();
    let model = load_model(&path).unwrap();
    assert_eq!(evaluate_model(&model, &exp.test).unwrap(), run.test);
    assert!(run.test.map > 0.5, "{:?}", run.test);

    let hits = top_k_retrieval(&model, &exp.test, 0, 10).unwrap();
    assert_eq!(hits.len(), 10);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn checkpoints_every_k_epochs() {
    let exp = prepare_synth_experiment(&small(), &TestSplit::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut writer = CheckpointWriter::new(dir.path(), 4, exp.train.class_names.clone());
    let data = TrainingData::new(&exp.train).unwrap();
    train_mmco(
        &data,
        &cfg(),
        Hooks {
            observer: Some(&mut writer),
            judge: None,
        },
    )
    .unwrap();
    // Epochs 4 and 8, four modality models each.
    assert_eq!(writer.written.len(), 8);
    assert!(dir.path().join("epoch_0008").join("m2.model").exists());
}

#[test]
fn voting_schemes_all_train() {
    let exp = prepare_synth_experiment(&small(), &TestSplit::default()).unwrap();
    for voting in [VotingScheme::Max, VotingScheme::Average, VotingScheme::Product] {
        let c = TrainConfig { voting, ..cfg() };
        let run = run_method(&exp.train, &exp.test, &c, Method::Mmco).unwrap();
        assert!(run.test.map.is_finite());
        for r in &run.outcome.reports {
            for l in &r.losses {
                assert!(l.mean_loss.is_finite());
            }
        }
    }
}

#[test]
fn missing_labels_is_a_data_error() {
    let mut exp = prepare_synth_experiment(&small(), &TestSplit::default()).unwrap();
    exp.train.labels = None;
    let err = TrainingData::new(&exp.train).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    exp.train.metadata = None;
    let err = label_dataset(&exp.train, &exp.train.class_names).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}
