use milpool::eval::{clip_durations, evaluate_split, reference_events, score, PostProcessConfig};
use milpool::model::{read_checkpoint, train, write_checkpoint, TrainConfig};
use milpool::synth::{generate, read_dataset, write_dataset, SynthConfig};
use milpool::{PoolingFunction, PoolingSpec, StagePlan};

fn small() -> SynthConfig {
    SynthConfig {
        n_train: 16,
        n_val: 4,
        n_test: 4,
        frames_per_clip: 25,
        feature_dim: 4,
        n_classes: 2,
        min_event_frames: 3,
        max_event_frames: 10,
        seed: 21,
        ..SynthConfig::default()
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    assert_eq!(generate(&small()).unwrap(), ds);
}

#[test]
fn corrupted_features_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&generate(&small()).unwrap(), dir.path()).unwrap();
    let path = dir.path().join("train.milp");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

#[test]
fn train_checkpoint_and_score() {
    let ds = generate(&small()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        hidden_dim: 4,
        batch_size: 4,
        pooling: PoolingSpec::new(PoolingFunction::Attention, StagePlan::new(vec![5]).unwrap()),
        ..TrainConfig::default()
    };
    let state = train(&ds, &cfg).unwrap();
    assert_eq!(state.history.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    write_checkpoint(&path, &state, &cfg).unwrap();
    let (restored, saved) = read_checkpoint(&path).unwrap();
    assert_eq!(restored, state);
    assert_eq!(saved.fingerprint(), cfg.fingerprint());

    let post = PostProcessConfig::default();
    let (_, m) = evaluate_split(&ds.test, &state.best_params, &ds.class_names, ds.frame_rate_hz, &post).unwrap();
    assert!((0.0..=1.0).contains(&m.f1));
    assert!(m.error_rate >= 0.0);

    // the reference scored against itself is perfect
    let reference = reference_events(&ds.test, &ds.class_names, ds.frame_rate_hz);
    let perfect = score(&reference, &reference, &clip_durations(&ds.test, ds.frame_rate_hz), 1.0).unwrap();
    assert_eq!((perfect.error_rate, perfect.f1), (0.0, 1.0));
}
