//! Training loop behavior on small synthetic datasets.

use hierseg::dataprep::dataset::{Dataset, Sample};
use hierseg::dataprep::{make_folds, AugmentConfig, Split};
use hierseg::losses::{CeReduction, LossConfig};
use hierseg::metrics::EmptyPolicy;
use hierseg::model::{AnyModel, Checkpoint, Segmenter, Variant};
use hierseg::synthetic::{generate, SyntheticSpec};
use hierseg::trainer::{evaluate_checkpoint, mean_iou, model_seed, run_cv, train_fold, FoldPaths, TrainConfig};
use hierseg::Error;

fn small_dataset(images: usize) -> Dataset {
    let data = generate(&SyntheticSpec {
        images,
        children: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let manifest = make_folds(&data.ids(), 5, 0.2, 0).unwrap();
    Dataset::from_samples(data.tree.clone(), manifest, data.samples().unwrap())
}

fn config(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        epochs,
        batch_size: 2,
        learning_rate: Some(0.005),
        augment: AugmentConfig::identity(),
        loss: LossConfig {
            ce_reduction: CeReduction::Mean,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn fold_split(dataset: &Dataset) -> (Vec<&Sample>, Vec<&Sample>) {
    (
        dataset.subset(&dataset.manifest.train_ids(0)).unwrap(),
        dataset.subset(&dataset.manifest.val_ids(0)).unwrap(),
    )
}

fn fresh(config: &TrainConfig, dataset: &Dataset) -> AnyModel {
    AnyModel::new(config.variant, &dataset.tree, &config.model, model_seed(config.seed, 0))
}

#[test]
fn runs_with_one_seed_are_identical() {
    let dataset = small_dataset(10);
    let (train, val) = fold_split(&dataset);
    for variant in [Variant::Baseline, Variant::Hierarchical] {
        let cfg = config(variant, 2);
        let mut a = fresh(&cfg, &dataset);
        let mut b = fresh(&cfg, &dataset);
        let ra = train_fold(&mut a, &train, &val, &dataset.tree, &cfg, 0, None).unwrap();
        let rb = train_fold(&mut b, &train, &val, &dataset.tree, &cfg, 0, None).unwrap();
        assert_eq!(ra.record, rb.record);
        assert_eq!(a.store().to_records(), b.store().to_records());
        assert_eq!(ra.record.epochs.len(), 2);
        assert!(ra.record.step_losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dataset = small_dataset(10);
    let (train, val) = fold_split(&dataset);
    let mut cfg = config(Variant::Hierarchical, 3);
    cfg.augment = AugmentConfig::standard();

    let mut straight = fresh(&cfg, &dataset);
    let full = train_fold(&mut straight, &train, &val, &dataset.tree, &cfg, 0, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let paths = FoldPaths::new(dir.path(), 0);
    let mut first = fresh(&cfg, &dataset);
    let short = TrainConfig { epochs: 2, ..cfg.clone() };
    train_fold(&mut first, &train, &val, &dataset.tree, &short, 0, Some(&paths)).unwrap();
    assert!(paths.state().exists() && paths.best().exists() && paths.log().exists());

    // A fresh process: new model, state picked up from disk.
    let mut second = fresh(&cfg, &dataset);
    let resumed = train_fold(&mut second, &train, &val, &dataset.tree, &cfg, 0, Some(&paths)).unwrap();
    assert_eq!(resumed.record.step_losses, full.record.step_losses);
    assert_eq!(second.store().to_records(), straight.store().to_records());
    let log = std::fs::read_to_string(paths.log()).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn checkpoints_reproduce_metrics() {
    let dataset = small_dataset(10);
    let (train, val) = fold_split(&dataset);
    let cfg = config(Variant::Hierarchical, 1);
    let mut model = fresh(&cfg, &dataset);
    train_fold(&mut model, &train, &val, &dataset.tree, &cfg, 0, None).unwrap();
    let before = mean_iou(&model, &val, &dataset.tree, EmptyPolicy::One).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::capture(&model, &dataset.tree, &cfg.model, Some(0)).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let restored = loaded.restore(&dataset.tree).unwrap();
    let after = mean_iou(&restored, &val, &dataset.tree, EmptyPolicy::One).unwrap();
    assert!((before - after).abs() <= 1e-6, "{before} vs {after}");

    let report = evaluate_checkpoint(&loaded, &dataset, Split::Fold(0), EmptyPolicy::One, Some(dir.path())).unwrap();
    assert!((report.average().iou.mean - before).abs() <= 1e-6);
    assert!(dir.path().join("fold0_summary.csv").exists());

    let other = SyntheticSpec::default().tree();
    assert!(matches!(loaded.restore(&other), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn non_finite_input_aborts_with_the_batch_ids() {
    let mut dataset = small_dataset(10);
    let poisoned = dataset.manifest.train_ids(0)[0].clone();
    let sample = dataset.samples.iter_mut().find(|s| s.id == poisoned).unwrap();
    sample.image[[3, 3]] = f64::NAN;
    let (train, val) = fold_split(&dataset);
    let cfg = config(Variant::Hierarchical, 1);
    let mut model = fresh(&cfg, &dataset);
    match train_fold(&mut model, &train, &val, &dataset.tree, &cfg, 0, None) {
        Err(Error::NonFinite { epoch, batch_ids, .. }) => {
            assert_eq!(epoch, 0);
            assert!(batch_ids.contains(&poisoned));
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.record)),
    }
}

#[test]
fn cross_validation_trains_every_fold() {
    let dataset = small_dataset(12);
    let mut cfg = config(Variant::Baseline, 1);
    cfg.max_steps = Some(1);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_cv(&cfg, &dataset, Some(dir.path())).unwrap();
    assert_eq!(outcome.records.len(), 5);
    for (k, r) in outcome.records.iter().enumerate() {
        assert_eq!(r.fold, k);
        assert_eq!(r.step_losses.len(), 1);
        assert!(dir.path().join(format!("fold{k}")).join("best.json").exists());
    }
    assert!(outcome.test.is_some());
    for file in ["config.toml", "folds.csv", "val_summary.csv", "test_records.csv"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    let saved = TrainConfig::from_toml(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}
