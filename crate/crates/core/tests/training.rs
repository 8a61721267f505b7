mod common;

use grqo::cli::RunManifest;
use grqo::synthdata::{build_splits, Scene, SplitName};
use grqo::trainer::{Mode, TrainConfig, Trainer};

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let data = build_splits(&common::small_spec(), 6).unwrap();
    let cfg = TrainConfig { mode: Mode::Sft, epochs: 20, batch_size: 4, eval: false, ..Default::default() };
    let mut t = Trainer::new(cfg, &data).unwrap();
    let batch: Vec<&Scene> = data.split(SplitName::Train).scenes.iter().take(4).collect();
    let losses: Vec<f64> = (0..50).map(|_| t.train_step(&batch).unwrap().total).collect();
    let head = losses[..5].iter().sum::<f64>() / 5.0;
    let tail = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "first steps {head:.3}, last steps {tail:.3}");
}

#[test]
fn forked_run_equals_standalone_run() {
    let data = build_splits(&common::small_spec(), 7).unwrap();
    let cfg = TrainConfig { beta: 0.1, ..common::small_config(Mode::Grqo) };
    let mut alone = Trainer::new(cfg.clone(), &data).unwrap();
    alone.run(None).unwrap();

    let mut warm = Trainer::new(TrainConfig { mode: Mode::Sft, ..cfg.clone() }, &data).unwrap();
    warm.run_epoch().unwrap();
    let mut forked = warm.fork(cfg).unwrap();
    forked.run(None).unwrap();

    assert_eq!(alone.history, forked.history);
    assert_eq!(alone.model.params.fingerprint(), forked.model.params.fingerprint());
}

#[test]
fn kl_stays_bounded_at_default_beta() {
    let data = build_splits(&common::small_spec(), 8).unwrap();
    let cfg = TrainConfig { epochs: 3, eval: false, ..common::small_config(Mode::Grqo) };
    let mut t = Trainer::new(cfg, &data).unwrap();
    t.run(None).unwrap();
    for m in &t.history[1..] {
        assert_eq!(m.phase, Mode::Grqo);
        assert!(m.loss.is_finite());
        assert!(m.loss.kl <= 10.0, "epoch {} mean KL {}", m.epoch, m.loss.kl);
    }
}

#[test]
fn run_replays_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_splits(&common::small_spec(), 9).unwrap();
    let cfg = common::small_config(Mode::Grqo);
    let first = tmp.path().join("first");
    RunManifest::new(&first, vec!["test".into()], &cfg, &data).write(&first).unwrap();
    Trainer::new(cfg, &data).unwrap().run(Some(&first)).unwrap();

    let manifest = RunManifest::read(&first).unwrap();
    assert_eq!(manifest.run_id, "first");
    assert_eq!(manifest.dataset.checksum, data.checksum());
    let replay = tmp.path().join("replay");
    manifest.replay(&replay).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&first), read(&replay));
}
