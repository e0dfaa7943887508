//! End-to-end training behaviour: descent, ablation coverage, determinism and resume.

mod common;

use common::tiny_model;
use hrcloud::autograd::{Graph, Mode};
use hrcloud::checkpoint::Checkpoint;
use hrcloud::loss::total_loss_graph;
use hrcloud::model::AblationFlags;
use hrcloud::synthetic::synthetic_scene;
use hrcloud::trainer::{tile_samples, Batch, LogRecord, TrainConfig, TrainSample, Trainer};

fn samples(n: usize, side: usize, seed: u64) -> Vec<TrainSample> {
    let scenes: Vec<_> = (0..n)
        .map(|i| synthetic_scene(side, side, seed + i as u64, &format!("s{i}")).unwrap())
        .collect();
    tile_samples(&scenes, side).unwrap()
}

fn small_config(flags: AblationFlags) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model = tiny_model(4, 32, flags);
    cfg.optimizer.batch_size = 2;
    cfg
}

/// Total loss of `batch` under the trainer's current parameters, without updating anything.
fn loss_of(tr: &Trainer, batch: &Batch) -> f64 {
    let mut g = Graph::new(&tr.store, Mode::Train);
    let x = g.input(batch.x.clone());
    let y = tr.net.forward(&mut g, x).unwrap();
    let ya = batch.x_aug.as_ref().map(|xa| {
        let xa = g.input(xa.clone());
        tr.net.forward(&mut g, xa).unwrap()
    });
    total_loss_graph(&mut g, y, ya, &batch.t, &tr.config.loss).unwrap().1.total
}

#[test]
fn fifty_steps_on_a_frozen_batch_halve_the_loss() {
    let mut tr = Trainer::new(TrainConfig::desk()).unwrap();
    let data = samples(2, 64, 21);
    let batch = tr.make_batch(&data, &[0, 1], 0).unwrap();
    let first = tr.train_step(&batch).unwrap().total;
    let mut last = first;
    for _ in 1..50 {
        last = tr.train_step(&batch).unwrap().total;
    }
    assert!(last <= 0.5 * first, "loss went from {first} to {last}");
}

#[test]
fn one_step_descends_for_small_learning_rates() {
    let data = samples(2, 32, 4);
    let mut descended = Vec::new();
    for lr in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
        let mut cfg = small_config(AblationFlags::FULL);
        cfg.optimizer.learning_rate = lr;
        cfg.optimizer.weight_decay = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let batch = tr.make_batch(&data, &[0, 1], 0).unwrap();
        let before = loss_of(&tr, &batch);
        tr.train_step(&batch).unwrap();
        descended.push((lr, loss_of(&tr, &batch) < before));
    }
    // Adam's first step moves every weight by about the rate, so only small rates are
    // guaranteed to stay within the region where the loss is locally linear.
    assert!(descended.iter().filter(|d| d.0 <= 1e-5).all(|d| d.1), "{descended:?}");
}

#[test]
fn every_flag_combination_trains_one_step() {
    let data = samples(2, 32, 8);
    for flags in AblationFlags::all_combinations() {
        let mut cfg = small_config(flags);
        cfg.loss.tau = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.store.clone();
        let batch = tr.make_batch(&data, &[0, 1], 0).unwrap();
        assert_eq!(batch.x_aug.is_some(), flags.use_aug_view_loss);
        let b = tr.train_step(&batch).unwrap();
        b.check_finite().unwrap();
        assert_eq!(b.l_ce_aug > 0.0, flags.use_aug_view_loss, "{flags:?}");
        let stuck: Vec<&str> = tr
            .store
            .params()
            .iter()
            .zip(before.params())
            .filter(|(a, b)| a.value == b.value)
            // A zero bias behind a ReLU that is dead on this batch has no gradient, and
            // decoupled decay leaves zero at zero. Anything else must move.
            .filter(|(a, _)| a.value.data().iter().any(|&v| v != 0.0))
            .map(|(a, _)| a.name.as_str())
            .collect();
        assert!(stuck.is_empty(), "{flags:?}: {stuck:?} did not move");
    }
}

fn run(cfg: &TrainConfig, data: &[TrainSample]) -> (Vec<LogRecord>, Trainer) {
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let log = tr.fit(data, &[], &mut |_, _| Ok(())).unwrap();
    (log, tr)
}

#[test]
fn seeded_runs_reproduce_loss_traces() {
    let data = samples(3, 32, 12);
    let mut cfg = small_config(AblationFlags::FULL);
    cfg.optimizer.epochs = 10;
    cfg.max_steps = Some(10);
    let (a, ta) = run(&cfg, &data);
    let (b, tb) = run(&cfg, &data);
    assert_eq!(a.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count(), 10);
    assert_eq!(a, b);
    assert_eq!(ta.store, tb.store);

    cfg.optimizer.seed += 1;
    let (c, _) = run(&cfg, &data);
    assert_ne!(a, c);
}

#[test]
fn resuming_from_a_saved_checkpoint_is_bit_identical() {
    let data = samples(3, 32, 15);
    let mut cfg = small_config(AblationFlags::FULL);
    cfg.optimizer.epochs = 10;
    cfg.max_steps = Some(9);
    let (straight, done) = run(&cfg, &data);

    // Three samples at batch 2 make two steps per epoch; stopping after step 3 leaves
    // the second epoch half done.
    let mut half = cfg.clone();
    half.max_steps = Some(3);
    let (mut resumed, first) = run(&half, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.safetensors");
    assert_eq!((first.progress.epoch, first.progress.cursor), (1, 2));
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let mut tr = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    tr.config.max_steps = Some(9);
    resumed.extend(tr.fit(&data, &[], &mut |_, _| Ok(())).unwrap());
    assert_eq!(resumed, straight);
    assert_eq!(tr.store, done.store);
    assert_eq!(tr.adam, done.adam);
    assert_eq!(tr.progress, done.progress);
}
