use std::fs;

use ndarray::Array2;

use mardtn::dataio::{DatasetKind, Region};
use mardtn::losses::{LossSpec, LossTerm};
use mardtn::model::{ModelConfig, NormKind};
use mardtn::preprocess::SlicePair;
use mardtn::trainer::*;
use mardtn::Error;

/// Disk-shaped body with a smooth pattern; the MVCT is a contrast-changed
/// copy of the kVCT.
fn pair(seed: u64, d: usize, artifact: bool) -> SlicePair {
    let c = (d as f32 - 1.0) / 2.0;
    let mask = Array2::from_shape_fn((d, d), |(r, q)| (r as f32 - c).hypot(q as f32 - c) < 0.42 * d as f32);
    let phase = seed as f32 * 0.7;
    let kv = Array2::from_shape_fn((d, d), |(r, q)| {
        if mask[[r, q]] {
            0.5 * ((r as f32 * 0.4 + phase).sin() * (q as f32 * 0.3).cos())
        } else {
            -1.0
        }
    });
    let mv = Array2::from_shape_fn((d, d), |(r, q)| if mask[[r, q]] { 0.6 * kv[[r, q]] + 0.2 } else { -1.0 });
    SlicePair {
        kv,
        mv,
        body_mask: mask,
        region: Region::Head,
        is_artifact: artifact,
        patient_id: format!("P{seed:03}"),
        slice_index: seed as usize,
    }
}

fn pairs(n: u64, offset: u64) -> Vec<SlicePair> {
    (0..n).map(|i| pair(offset + i, 16, i % 3 == 0)).collect()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        depth: 2,
        base_channels: 4,
        ..ModelConfig::default()
    }
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        patience: max_epochs.min(5),
        batch_size: 3,
        seed: 9,
        loss: LossSpec::new(&[LossTerm::L1w, LossTerm::Ssim]),
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_single_pair() {
    let cfg = TrainConfig {
        loss: LossSpec::new(&[LossTerm::L1w]),
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        depth: 2,
        base_channels: 8,
        ..ModelConfig::default()
    };
    let mut t = Trainer::new(&model, &cfg).unwrap();
    let batch = [pair(1, 16, true)];
    let losses: Vec<f64> = (0..50).map(|_| t.step(&batch).unwrap()).collect();
    assert!(losses[49] * 10.0 <= losses[0], "loss {} -> {}", losses[0], losses[49]);
}

#[test]
fn frozen_model_stops_after_patience_plus_one_epochs() {
    // instance norm has no running statistics, so lr = 0 freezes the output
    let model = ModelConfig {
        norm: NormKind::Instance,
        ..small_model()
    };
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        max_epochs: 20,
        patience: 5,
        ..quick(20)
    };
    let out = train(&model, &cfg, &pairs(6, 0), &pairs(3, 50), &TrainOptions::default()).unwrap();
    assert_eq!(out.log.len(), 6);
    assert_eq!(out.best_epoch, 1);
    assert!(out.stopped_early);
    assert!(out.log.windows(2).all(|w| w[0].val_loss == w[1].val_loss));
}

#[test]
fn epochs_never_exceed_best_plus_patience() {
    let cfg = TrainConfig {
        patience: 2,
        ..quick(8)
    };
    let out = train(&small_model(), &cfg, &pairs(6, 0), &pairs(3, 50), &TrainOptions::default()).unwrap();
    assert!(out.log.len() <= 8.min(out.best_epoch + 2));
    let best = out.log.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch - 1].val_loss, best);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (tr, va) = (pairs(6, 0), pairs(3, 50));
    let a = train(&small_model(), &quick(3), &tr, &va, &TrainOptions::default()).unwrap();
    let b = train(&small_model(), &quick(3), &tr, &va, &TrainOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    let c = train(&small_model(), &TrainConfig { seed: 10, ..quick(3) }, &tr, &va, &TrainOptions::default()).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (tr, va) = (pairs(6, 0), pairs(3, 50));
    let cfg = quick(4);
    let dir = tempfile::tempdir().unwrap();
    let opts = |name: &str, stop: Option<usize>, resume: bool| TrainOptions {
        run_dir: Some(dir.path().join(name)),
        resume,
        stop_after_epoch: stop,
    };
    let full = train(&small_model(), &cfg, &tr, &va, &opts("full", None, false)).unwrap();
    let first = train(&small_model(), &cfg, &tr, &va, &opts("split", Some(2), false)).unwrap();
    assert_eq!(first.log.len(), 2);
    let resumed = train(&small_model(), &cfg, &tr, &va, &opts("split", None, true)).unwrap();
    assert_eq!(resumed.log.len(), full.log.len());
    let (a, b) = (full.log.last().unwrap().val_loss, resumed.log.last().unwrap().val_loss);
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    assert_eq!(
        fs::read(dir.path().join("full").join(LOG_FILE)).unwrap(),
        fs::read(dir.path().join("split").join(LOG_FILE)).unwrap()
    );
}

#[test]
fn resume_with_other_config_is_refused() {
    let (tr, va) = (pairs(4, 0), pairs(2, 50));
    let dir = tempfile::tempdir().unwrap();
    let opts = |resume| TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
        resume,
        stop_after_epoch: Some(1),
    };
    train(&small_model(), &quick(3), &tr, &va, &opts(false)).unwrap();
    let other = TrainConfig {
        learning_rate: 5e-4,
        ..quick(3)
    };
    assert!(matches!(train(&small_model(), &other, &tr, &va, &opts(true)), Err(Error::ConfigMismatch { .. })));
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let (tr, va) = (pairs(4, 0), pairs(2, 50));
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(3);
    let opts = |resume, stop| TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
        resume,
        stop_after_epoch: stop,
    };
    train(&small_model(), &cfg, &tr, &va, &opts(false, Some(1))).unwrap();
    let mut poisoned = tr.clone();
    // a non-finite target passes input validation but poisons the loss
    poisoned[2].mv[[8, 8]] = f32::NAN;
    match train(&small_model(), &cfg, &poisoned, &va, &opts(true, None)) {
        Err(Error::Divergence { epoch }) => assert_eq!(epoch, 2),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
    let ck = load_checkpoint(dir.path().join(LAST_CHECKPOINT), Some(&small_model())).unwrap();
    assert_eq!(ck.manifest.epoch, 1);
    assert!(ck.params.tensors.iter().flat_map(|t| &t.data).all(|v| v.is_finite()));
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        dataset: DatasetKind::Art,
        ..quick(2)
    };
    train(
        &small_model(),
        &cfg,
        &pairs(4, 0),
        &pairs(2, 50),
        &TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 3);
    let stored = RunConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(stored.train, cfg);
    let best = load_checkpoint(dir.path().join(BEST_CHECKPOINT), Some(&small_model())).unwrap();
    assert!(best.manifest.val_loss.is_some());
    assert!(best.optimizer.is_none());
}

#[test]
fn evaluation_does_not_depend_on_batching() {
    let params = Trainer::new(&small_model(), &quick(1)).unwrap().params;
    let va = pairs(5, 50);
    let a = predict(&params, &va, 1).unwrap();
    let b = predict(&params, &va, 4).unwrap();
    assert_eq!(a, b);
    let loss = LossSpec::new(&[LossTerm::L1w]);
    assert_eq!(validation_metrics(&params, &loss, &va, 2).unwrap(), validation_metrics(&params, &loss, &va, 5).unwrap());
}
