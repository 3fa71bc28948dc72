mod common;

use std::fs;

use harmonizer_core::dataset::SplitSizes;
use harmonizer_core::networks::{discriminate, DiscriminatorConfig, ModelBundle};
use harmonizer_core::training::{
    preprocess, train, StepRecord, TrainConfig, TrainOptions, Trainer, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, LOG_FILE, VALIDATION_LOG_FILE,
};

fn read_log(path: &std::path::Path) -> Vec<StepRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::dataset(
        &dir.path().join("data"),
        SplitSizes {
            train: 3,
            val: 0,
            test: 0,
        },
        16,
        1,
    );
    let cfg = TrainConfig {
        epochs: 2,
        ..common::tiny_train_config(16)
    };

    let straight = dir.path().join("straight");
    let full = train(
        &cfg,
        &manifest,
        TrainOptions {
            out_dir: Some(straight.clone()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(full.bundle.step, 6);

    // Stop mid-epoch, reload from disk, continue.
    let split = dir.path().join("split");
    let first = train(
        &TrainConfig {
            max_steps: Some(4),
            ..cfg.clone()
        },
        &manifest,
        TrainOptions {
            out_dir: Some(split.clone()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(
        (
            first.bundle.step,
            first.bundle.epoch,
            first.bundle.epoch_step
        ),
        (4, 1, 1)
    );
    let resumed = ModelBundle::load(&split.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(resumed.optimizer, first.bundle.optimizer);
    let second = train(
        &cfg,
        &manifest,
        TrainOptions {
            out_dir: Some(split.clone()),
            resume: Some(resumed),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(second.records.first().map(|r| r.step), Some(5));

    let a = read_log(&straight.join(LOG_FILE));
    let b = read_log(&split.join(LOG_FILE));
    assert_eq!(
        b.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5, 6]
    );
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.step, x.epoch, &x.losses), (y.step, y.epoch, &y.losses));
    }
    assert_eq!(
        full.bundle.generator.params().checksum(),
        second.bundle.generator.params().checksum()
    );
    assert_eq!(
        full.bundle.discriminator.params().checksum(),
        second.bundle.discriminator.params().checksum()
    );
    assert_eq!(full.bundle.optimizer, second.bundle.optimizer);
}

#[test]
fn zero_epochs_returns_the_initial_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::dataset(
        dir.path(),
        SplitSizes {
            train: 1,
            val: 0,
            test: 0,
        },
        16,
        2,
    );
    let cfg = TrainConfig {
        epochs: 0,
        ..common::tiny_train_config(16)
    };
    let out = train(&cfg, &manifest, TrainOptions::default()).unwrap();
    let fresh =
        ModelBundle::new(cfg.generator.clone(), cfg.discriminator.clone(), cfg.seed).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.bundle.step, 0);
    assert_eq!(
        out.bundle.generator.params().checksum(),
        fresh.generator.params().checksum()
    );
}

#[test]
fn validation_logs_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::dataset(
        &dir.path().join("data"),
        SplitSizes {
            train: 2,
            val: 1,
            test: 0,
        },
        16,
        3,
    );
    let cfg = TrainConfig {
        epochs: 2,
        validate: true,
        ..common::tiny_train_config(16)
    };
    let out_dir = dir.path().join("run");
    let out = train(
        &cfg,
        &manifest,
        TrainOptions {
            out_dir: Some(out_dir.clone()),
            cache_samples: true,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(out.validation.len(), 2);
    assert!(out
        .validation
        .iter()
        .all(|v| v.psnr.is_finite() && v.mse >= 0.0));
    assert_eq!(
        fs::read_to_string(out_dir.join(VALIDATION_LOG_FILE))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert!(out_dir.join(BEST_CHECKPOINT).is_file());
    let steps: Vec<u64> = read_log(&out_dir.join(LOG_FILE))
        .iter()
        .map(|r| r.step)
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[test]
fn discriminator_overfits_one_triple() {
    let pair = common::pairs(1, 32, 11).remove(0);
    let prepared = preprocess(&pair, 32);
    let cfg = TrainConfig {
        lr: 1e-3,
        discriminator: DiscriminatorConfig {
            base_channels: 8,
            depth: 3,
            max_channels: 32,
            ..DiscriminatorConfig::default()
        },
        ..common::tiny_train_config(32)
    };
    let bundle = ModelBundle::new(cfg.generator.clone(), cfg.discriminator.clone(), 0).unwrap();
    let mut trainer = Trainer::new(cfg, bundle).unwrap();
    let mae = |t: &Trainer| {
        let disc = &t.bundle().discriminator;
        let on_comp = discriminate(disc, &pair.comp_2).unwrap();
        let on_real = discriminate(disc, &pair.gt_2).unwrap();
        let n = pair.mask_2.data().len() as f64;
        let comp_err: f64 = on_comp
            .values
            .iter()
            .zip(pair.mask_2.data())
            .map(|(d, m)| (d - m).abs() as f64)
            .sum();
        let real_err: f64 = on_real.values.iter().map(|d| d.abs() as f64).sum();
        (comp_err + real_err) / (2.0 * n)
    };
    let before = mae(&trainer);
    let mut after = before;
    for step in 1..=500 {
        // The composite stands in for the harmonized frame: both carry
        // the mask as target.
        trainer
            .discriminator_step(&[&prepared], &prepared.comp_2)
            .unwrap();
        if step % 50 == 0 {
            after = mae(&trainer);
            if after < 0.05 {
                break;
            }
        }
    }
    assert!(after < 0.05, "MAE {before:.4} -> {after:.4}");
}
