mod common;

use common::{pair, tiny_config, tiny_pairs, TINY_VOCAB};
use red_core::config::{DecoderKind, EncoderKind, RankMode};
use red_core::error::Error;
use red_core::eval::perplexity;
use red_core::model::RedModel;
use red_core::par::Execution;
use red_core::substrate::{load_checkpoint, restore_into};
use red_core::trainer::{train, train_with, TrainOptions};

fn pairs() -> Vec<red_core::corpus::HistoryResponsePair> {
    (0..10u32)
        .map(|i| {
            pair(
                &[&[4 + i % 3], &[5, 6], &[4 + (i + 1) % 3]],
                &[4 + (i + 2) % 3, 6],
            )
        })
        .collect()
}

fn model(mode: RankMode) -> (RedModel, red_core::substrate::ParameterSet) {
    RedModel::init(
        &tiny_config(EncoderKind::HierLstm, DecoderKind::Lstm, mode),
        TINY_VOCAB,
        1,
    )
    .unwrap()
}

#[test]
fn single_epoch_writes_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.ckpt");
    let log = dir.path().join("log.jsonl");
    let (m, mut params) = model(RankMode::Global);
    let opts = TrainOptions {
        max_epochs: 1,
        checkpoint: Some(ckpt.clone()),
        log: Some(log.clone()),
        ..TrainOptions::default()
    };
    let out = train(&m, &mut params, &tiny_pairs(), &tiny_pairs(), &opts).unwrap();
    assert_eq!(out.epochs_run, 1);
    assert_eq!(out.best_epoch, 1);
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn zero_epochs_saves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    let (m, mut params) = model(RankMode::Off);
    let before = params.clone();
    let opts = TrainOptions {
        max_epochs: 0,
        checkpoint: Some(ckpt.clone()),
        ..TrainOptions::default()
    };
    let out = train(&m, &mut params, &tiny_pairs(), &tiny_pairs(), &opts).unwrap();
    assert_eq!(out.epochs_run, 0);
    let (loaded, _) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.flat_values(), before.flat_values());
}

#[test]
fn early_stopping_after_patience() {
    let (m, mut params) = model(RankMode::Off);
    for patience in [1, 2, 4] {
        let opts = TrainOptions {
            max_epochs: 50,
            patience,
            ..TrainOptions::default()
        };
        // Improves once, then only gets worse.
        let out = train_with(&m, &mut params, &tiny_pairs(), &opts, |_, _, epoch| {
            Ok(epoch as f64)
        })
        .unwrap();
        assert_eq!(out.epochs_run, patience + 1);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.log.iter().filter(|r| r.improved).count(), 1);
    }
}

#[test]
fn ties_do_not_count_as_improvement() {
    let (m, mut params) = model(RankMode::Off);
    let opts = TrainOptions {
        max_epochs: 10,
        patience: 3,
        ..TrainOptions::default()
    };
    let out = train_with(&m, &mut params, &tiny_pairs(), &opts, |_, _, _| Ok(7.0)).unwrap();
    assert_eq!(out.epochs_run, 4);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn same_seed_same_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for run in 0..2 {
        let log = dir.path().join(format!("{run}.jsonl"));
        let (m, mut params) = model(RankMode::Local);
        let opts = TrainOptions {
            max_epochs: 3,
            batch_size: 3,
            seed: 17,
            log: Some(log.clone()),
            ..TrainOptions::default()
        };
        train(&m, &mut params, &pairs(), &pairs()[..3], &opts).unwrap();
        logs.push(std::fs::read(&log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn different_seed_different_order() {
    let mut ppls = Vec::new();
    for seed in [1, 2] {
        let (m, mut params) = model(RankMode::Off);
        let opts = TrainOptions {
            max_epochs: 2,
            batch_size: 3,
            seed,
            ..TrainOptions::default()
        };
        let out = train(&m, &mut params, &pairs(), &pairs()[..3], &opts).unwrap();
        ppls.push(out.best_valid_ppl);
    }
    assert_ne!(ppls[0], ppls[1]);
}

#[test]
fn parallel_matches_sequential() {
    let mut results = Vec::new();
    for exec in [Execution::Parallel, Execution::Sequential] {
        let (m, mut params) = model(RankMode::Global);
        let opts = TrainOptions {
            max_epochs: 2,
            batch_size: 4,
            exec,
            ..TrainOptions::default()
        };
        let out = train(&m, &mut params, &pairs(), &pairs()[..4], &opts).unwrap();
        results.push((params.flat_values(), out.log));
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn checkpoint_round_trip_preserves_ppl() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.ckpt");
    let (m, mut params) = model(RankMode::Global);
    let opts = TrainOptions {
        max_epochs: 3,
        checkpoint: Some(ckpt.clone()),
        ..TrainOptions::default()
    };
    let out = train(&m, &mut params, &pairs(), &pairs()[..4], &opts).unwrap();
    let (loaded, _) = load_checkpoint(&ckpt).unwrap();
    let (m2, mut fresh) = model(RankMode::Global);
    restore_into(&mut fresh, &loaded).unwrap();
    let a = perplexity(&m, &out.best_params, &pairs()[..4], Execution::Sequential).unwrap();
    let b = perplexity(&m2, &fresh, &pairs()[..4], Execution::Sequential).unwrap();
    assert!((a - b).abs() < 1e-9);
    assert!((a - out.best_valid_ppl).abs() < 1e-9);
}

#[test]
fn nan_parameter_reports_divergence() {
    let (m, mut params) = model(RankMode::Off);
    let id = params.id("dec.out.b").unwrap();
    params.value_mut(id).values_mut()[0] = f64::NAN;
    let err = train(
        &m,
        &mut params,
        &pairs(),
        &pairs(),
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Diverged { epoch: 1, batch: 0 }),
        "{err:?}"
    );
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn rejects_bad_options_and_empty_splits() {
    let (m, mut params) = model(RankMode::Off);
    let bad = TrainOptions {
        batch_size: 0,
        ..TrainOptions::default()
    };
    assert!(matches!(
        train(&m, &mut params, &pairs(), &pairs(), &bad),
        Err(Error::Config(_))
    ));
    assert!(train(&m, &mut params, &[], &pairs(), &TrainOptions::default()).is_err());
    assert!(train(&m, &mut params, &pairs(), &[], &TrainOptions::default()).is_err());
}

#[test]
fn training_reduces_loss() {
    let (m, mut params) = model(RankMode::Global);
    let opts = TrainOptions {
        max_epochs: 30,
        patience: 30,
        lr: 0.02,
        batch_size: 5,
        ..TrainOptions::default()
    };
    let out = train(&m, &mut params, &pairs(), &pairs(), &opts).unwrap();
    let first = out.log.first().unwrap();
    let last = out.log.last().unwrap();
    assert!(last.train.total < first.train.total);
    assert!(out.best_valid_ppl < first.valid_ppl);
}
