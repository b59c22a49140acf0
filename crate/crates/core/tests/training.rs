use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqnet::data::{synth_generate, PreparedDataset, SynthConfig};
use seqnet::network::{Model, NetworkConfig};
use seqnet::train::{sgd_step, train, CheckpointPaths, TrainConfig, TrainState};
use seqnet::{Error, SequenceLabel, Tensor};

fn tiny_data(count: usize) -> PreparedDataset {
    let cfg = SynthConfig {
        count,
        max_len: 2,
        alphabet: "012".into(),
        length_weights: vec![1.0, 1.0],
        canvas: [12, 16],
        glyph_height: [7.0, 9.0],
        clutter: 0,
        seed: 3,
        ..Default::default()
    };
    let m = synth_generate(&cfg).unwrap();
    PreparedDataset::from_manifest(&m, NetworkConfig::tiny().preprocess, 1).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { batch_size: 8, epochs: 2, learning_rate: 0.01, seed: 5, ..Default::default() }
}

#[test]
fn memorizes_a_single_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_hwc(8, 8, 1, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let batch = vec![(x, SequenceLabel::new(vec![1, 2]))];
    let mut state = TrainState::new(Model::build(NetworkConfig::tiny(), 4).unwrap());
    let cfg = TrainConfig { dropout: false, momentum: 0.9, ..Default::default() };
    let losses: Vec<f64> = (0..200).map(|_| sgd_step(&mut state, &batch, &cfg, 0.01).unwrap()).collect();
    let window = |i: usize| losses[i..i + 20].iter().sum::<f64>() / 20.0;
    for i in (0..=160).step_by(20) {
        assert!(window(i + 20) < window(i), "smoothed loss rose at step {i}: {losses:?}");
    }
    assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());
}

#[test]
fn zero_epochs_leaves_the_model_untouched() {
    let data = tiny_data(60);
    let model = Model::build(NetworkConfig::tiny(), 1).unwrap();
    let mut state = TrainState::new(model.clone());
    let report = train(&mut state, &data, &TrainConfig { epochs: 0, ..small_cfg() }, &CheckpointPaths::default()).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(state.model.tensors(), model.tensors());
}

#[test]
fn runs_are_bit_identical_and_thread_count_independent() {
    let data = tiny_data(120);
    let run = |cfg: TrainConfig| {
        let mut state = TrainState::new(Model::build(NetworkConfig::tiny().with_dropout(0.2), 1).unwrap());
        let r = train(&mut state, &data, &cfg, &CheckpointPaths::default()).unwrap();
        (r.step_losses, state.model)
    };
    let a = run(TrainConfig { dropout: false, ..small_cfg() });
    let b = run(TrainConfig { dropout: false, ..small_cfg() });
    assert_eq!(a, b);
    let c = run(TrainConfig { dropout: true, ..small_cfg() });
    let d = run(TrainConfig { dropout: true, threads: 3, ..small_cfg() });
    assert_eq!(c, d);
    assert_ne!(a.0, c.0);
}

#[test]
fn resumed_run_reproduces_uninterrupted_losses() {
    let data = tiny_data(120);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 3, ..small_cfg() };
    let fresh = || TrainState::new(Model::build(NetworkConfig::tiny(), 2).unwrap());

    let mut full = fresh();
    let full_report = train(&mut full, &data, &cfg, &CheckpointPaths::default()).unwrap();

    let mut first = fresh();
    let paths = CheckpointPaths { state: Some(dir.path().join("state.ckpt")), ..Default::default() };
    let head = train(&mut first, &data, &TrainConfig { epochs: 1, ..cfg.clone() }, &paths).unwrap();
    let mut resumed = TrainState::load(&dir.path().join("state.ckpt")).unwrap();
    assert_eq!(resumed.epoch, 1);
    let tail = train(&mut resumed, &data, &cfg, &CheckpointPaths::default()).unwrap();

    let stitched: Vec<f64> = head.step_losses.iter().chain(&tail.step_losses).copied().collect();
    assert_eq!(stitched.len(), full_report.step_losses.len());
    assert!(stitched.iter().zip(&full_report.step_losses).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(resumed.model.tensors(), full.model.tensors());
}

#[test]
fn writes_separate_best_checkpoints() {
    let data = tiny_data(120);
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(Model::build(NetworkConfig::tiny(), 2).unwrap());
    let report = train(&mut state, &data, &small_cfg(), &CheckpointPaths::in_dir(dir.path())).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(report.epochs.iter().enumerate().all(|(i, e)| e.epoch == i && e.train_loss.is_finite()));
    assert!(dir.path().join("best_accuracy.ckpt").exists());
    assert!(dir.path().join("best_coverage.ckpt").exists());
    let best = Model::load(&dir.path().join("best_accuracy.ckpt")).unwrap();
    assert_eq!(best.config(), state.model.config());
    assert!(report.to_csv().starts_with("epoch,steps,train_loss,val_accuracy,val_coverage,elapsed\n"));
}

#[test]
fn empty_validation_split_is_rejected() {
    let data = tiny_data(1);
    let (_, val) = data.split(0.1);
    assert!(val.is_empty(), "sample id unexpectedly in the validation split");
    let mut state = TrainState::new(Model::build(NetworkConfig::tiny(), 2).unwrap());
    let err = train(&mut state, &data, &small_cfg(), &CheckpointPaths::default()).unwrap_err();
    assert!(matches!(err, Error::Empty(_)), "{err:?}");
}

#[test]
fn divergence_is_reported_not_propagated() {
    let data = tiny_data(60);
    let mut state = TrainState::new(Model::build(NetworkConfig::tiny(), 2).unwrap());
    let cfg = TrainConfig { learning_rate: 1e12, momentum: 0.0, ..small_cfg() };
    let err = train(&mut state, &data, &cfg, &CheckpointPaths::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    assert!(state.model.is_finite());
}
