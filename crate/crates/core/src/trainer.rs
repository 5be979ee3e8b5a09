//! Optimization loop, plateau learning-rate schedule, best-checkpoint
//! selection and the k-fold cross-validation harness.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml              effective configuration, every default filled in
//! folds.csv                the manifest every variant shares
//! fold<k>/log.csv          one row per epoch
//! fold<k>/steps.csv        total loss of every optimizer step
//! fold<k>/best.json        checkpoint of the best validation epoch
//! fold<k>/state.json       resume state after the last finished epoch
//! val_records.csv  val_summary.csv  val_summary.txt
//! test_records.csv test_summary.csv test_summary.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::dataset::{Dataset, Sample};
use crate::dataprep::io;
use crate::dataprep::{
    augment, compute_class_weights, compute_flat_weights, hier_targets_to_mask, AugmentConfig, HierTargetStack,
    LossWeights, WeightScheme,
};
use crate::error::{Error, Result};
use crate::hierarchy::ClassTree;
use crate::losses::{LevelLoss, LossBreakdown, LossConfig};
use crate::metrics::{aggregate, evaluate_image, image_records, EmptyPolicy, ImageRecord, MetricsReport};
use crate::model::{AnyModel, Checkpoint, ModelConfig, Segmenter, Variant};
use crate::nn::{AdamW, AdamWConfig, ParamRecord};

/// Starting learning rate of the baseline on the reference trunk.
pub const BASELINE_LR: f64 = 0.018;
/// Starting learning rate of the hierarchical variant on the reference trunk.
pub const HIERARCHICAL_LR: f64 = 0.022;

/// Which epoch loss decides whether training improved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    /// Absolute decrease below the best loss that counts as improvement.
    pub tolerance: f64,
    pub monitor: Monitor,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            factor: 0.5,
            patience: 3,
            floor: 0.001,
            tolerance: 1e-5,
            monitor: Monitor::Train,
        }
    }
}

/// Reduce-on-plateau state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub stalls: usize,
    pub best: Option<f64>,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            lr,
            stalls: 0,
            best: None,
        }
    }
}

/// Advances the schedule by one epoch and returns the new rate.
pub fn lr_step(state: &mut PlateauState, improved: bool, config: &ScheduleConfig) -> f64 {
    if improved {
        state.stalls = 0;
    } else {
        state.stalls += 1;
        if state.stalls >= config.patience {
            state.lr = (state.lr * config.factor).max(config.floor);
            state.stalls = 0;
        }
    }
    state.lr
}

/// Records an epoch loss, deciding improvement against the best so far.
pub fn observe_loss(state: &mut PlateauState, loss: f64, config: &ScheduleConfig) -> f64 {
    let improved = state.best.is_none_or(|best| loss < best - config.tolerance);
    if improved {
        state.best = Some(loss);
    }
    lr_step(state, improved, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Trunk identifier; only `tiny` ships with the crate.
    pub backbone: String,
    /// Starting rate; the variant's default when absent.
    pub learning_rate: Option<f64>,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square side images are resampled to; native size when absent.
    pub image_size: Option<usize>,
    /// Stop after this many optimizer steps in each fold.
    pub max_steps: Option<usize>,
    /// Folds to train, starting at fold 0; all when absent.
    pub folds_to_run: Option<usize>,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub weights: WeightScheme,
    pub model: ModelConfig,
    pub empty_classes: EmptyPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Hierarchical,
            backbone: "tiny".into(),
            learning_rate: None,
            schedule: ScheduleConfig::default(),
            epochs: 80,
            batch_size: 4,
            image_size: None,
            max_steps: None,
            folds_to_run: None,
            seed: 0,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::standard(),
            loss: LossConfig::default(),
            weights: WeightScheme::default(),
            model: ModelConfig::default(),
            empty_classes: EmptyPolicy::One,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.variant {
            Variant::Baseline => BASELINE_LR,
            Variant::Hierarchical => HIERARCHICAL_LR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.backbone != "tiny" {
            return fail(format!("unknown backbone '{}'; available: tiny", self.backbone));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return fail(format!("learning rate {lr} must be positive"));
        }
        if self.schedule.floor > lr {
            return fail(format!("schedule floor {} exceeds starting rate {lr}", self.schedule.floor));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor < 1.0) {
            return fail(format!("schedule factor {} outside (0, 1)", self.schedule.factor));
        }
        if self.schedule.patience == 0 {
            return fail("schedule patience must be at least 1".into());
        }
        if let Some(size) = self.image_size {
            if size == 0 || size % 4 != 0 {
                return fail(format!("image_size {size} must be a positive multiple of 4"));
            }
        }
        let t = self.loss.threshold;
        if !(t > 0.0 && t < 1.0) || self.model.composition.threshold != t {
            return fail(format!(
                "thresholds must agree and lie in (0, 1): loss {t}, composition {}",
                self.model.composition.threshold
            ));
        }
        if self.model.composition.eps <= 0.0 {
            return fail("composition eps must be positive".into());
        }
        Ok(())
    }
}

/// Per-epoch seed, derived from the run seed, fold and epoch.
pub fn epoch_seed(seed: u64, fold: usize, epoch: usize) -> u64 {
    // SplitMix64 finalizer over a packed key.
    let mut z = seed
        .wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((epoch as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model seed of a fold.
pub fn model_seed(seed: u64, fold: usize) -> u64 {
    epoch_seed(seed, fold, usize::MAX)
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let depth = items.first().map_or(0, |b| b.levels.len());
    let mut levels = vec![LevelLoss::default(); depth];
    let mut consistency = 0.0;
    let mut total = 0.0;
    for b in items {
        for (acc, l) in levels.iter_mut().zip(&b.levels) {
            acc.dice += l.dice / n;
            acc.ce += l.ce / n;
        }
        consistency += b.consistency / n;
        total += b.total / n;
    }
    LossBreakdown {
        levels,
        consistency,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train: LossBreakdown,
    pub val_loss: Option<f64>,
    /// Unweighted class-mean IoU over the validation images.
    pub val_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_iou: f64,
}

impl RunRecord {
    pub fn log_csv(&self) -> String {
        let depth = self.epochs.first().map_or(0, |e| e.train.levels.len());
        let mut out = String::from("epoch,lr,steps");
        for l in 0..depth {
            let _ = write!(out, ",dice_{l},ce_{l}");
        }
        out.push_str(",consistency,total,val_loss,val_iou\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{},{}", e.epoch, e.lr, e.steps);
            for l in &e.train.levels {
                let _ = write!(out, ",{:.8},{:.8}", l.dice, l.ce);
            }
            let val_loss = e.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
            let _ = writeln!(out, ",{:.8},{:.8},{},{:.6}", e.train.consistency, e.train.total, val_loss, e.val_iou);
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,total\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l:.10}", i + 1);
        }
        out
    }
}

/// Everything needed to continue a fold after an interruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub record: RunRecord,
    pub schedule: PlateauState,
    pub optimizer: AdamW,
    pub params: Vec<ParamRecord>,
    pub best_params: Option<Vec<ParamRecord>>,
    pub total_steps: usize,
}

/// Bilinear resampling of an image to `size × size`.
pub fn resize_image(image: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    if (h, w) == (size, size) {
        return image.clone();
    }
    Array2::from_shape_fn((size, size), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((x as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
        let bottom = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resampling of target planes.
pub fn resize_targets(targets: &HierTargetStack, size: usize) -> HierTargetStack {
    let (h, w) = (targets.height(), targets.width());
    if (h, w) == (size, size) {
        return targets.clone();
    }
    let levels = targets
        .levels()
        .iter()
        .map(|plane| {
            Array3::from_shape_fn((plane.dim().0, size, size), |(c, y, x)| {
                plane[[c, (y * h) / size, (x * w) / size]]
            })
        })
        .collect();
    HierTargetStack::new(levels).expect("resampling keeps the level structure")
}

fn resized(sample: &Sample, size: Option<usize>) -> Sample {
    match size {
        None => sample.clone(),
        Some(s) => Sample {
            id: sample.id.clone(),
            image: resize_image(&sample.image, s),
            targets: resize_targets(&sample.targets, s),
        },
    }
}

/// Class weights of a training split in the layout the variant expects.
pub fn training_weights(variant: Variant, train: &[&Sample], tree: &ClassTree, scheme: WeightScheme) -> Result<LossWeights> {
    let targets: Vec<HierTargetStack> = train.iter().map(|s| s.targets.clone()).collect();
    match variant {
        Variant::Hierarchical => compute_class_weights(&targets, tree, scheme),
        Variant::Baseline => {
            let masks = targets
                .iter()
                .map(|t| hier_targets_to_mask(t, tree))
                .collect::<Result<Vec<_>>>()?;
            Ok(LossWeights {
                levels: vec![compute_flat_weights(&masks, tree)?],
            })
        }
    }
}

/// Per-image metric records of a model over a set of samples.
pub fn evaluate<M: Segmenter + ?Sized>(
    model: &M,
    samples: &[&Sample],
    tree: &ClassTree,
    fold: usize,
    policy: EmptyPolicy,
) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    for s in samples {
        let pred = model.predict(&s.image)?;
        let counts = evaluate_image(&pred, &s.targets, tree)?;
        records.extend(image_records(&s.id, fold, &counts, tree, policy));
    }
    Ok(records)
}

pub fn class_names(tree: &ClassTree) -> Vec<String> {
    tree.nodes().iter().map(|n| n.name.clone()).collect()
}

/// Class-mean IoU over a set of samples.
pub fn mean_iou<M: Segmenter + ?Sized>(
    model: &M,
    samples: &[&Sample],
    tree: &ClassTree,
    policy: EmptyPolicy,
) -> Result<f64> {
    let records = evaluate(model, samples, tree, 0, policy)?;
    Ok(aggregate(records, &class_names(tree))?.average().iou.mean)
}

fn validation_loss<M: Segmenter + ?Sized>(
    model: &mut M,
    samples: &[&Sample],
    weights: &LossWeights,
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += model.accumulate(&s.image, &s.targets, weights, loss)?.total;
    }
    model.store_mut().zero_grad();
    Ok(total / samples.len().max(1) as f64)
}

/// Output of one fold.
pub struct FoldOutcome {
    pub record: RunRecord,
    pub best_params: Vec<ParamRecord>,
}

/// Where a fold persists its artifacts.
#[derive(Debug, Clone)]
pub struct FoldPaths {
    pub dir: PathBuf,
}

impl FoldPaths {
    pub fn new(run_dir: &Path, fold: usize) -> Self {
        FoldPaths {
            dir: run_dir.join(format!("fold{fold}")),
        }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }

    pub fn steps(&self) -> PathBuf {
        self.dir.join("steps.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.json")
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join("state.json")
    }
}

/// Trains one fold. With `paths`, logs and checkpoints are written after
/// every epoch and an existing resume state is picked up.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    model: &mut AnyModel,
    train: &[&Sample],
    val: &[&Sample],
    tree: &ClassTree,
    config: &TrainConfig,
    fold: usize,
    paths: Option<&FoldPaths>,
) -> Result<FoldOutcome> {
    if train.is_empty() {
        return Err(Error::Validation(format!("fold {fold} has no training images")));
    }
    let train: Vec<Sample> = train.iter().map(|s| resized(s, config.image_size)).collect();
    let val: Vec<Sample> = val.iter().map(|s| resized(s, config.image_size)).collect();
    let train_refs: Vec<&Sample> = train.iter().collect();
    let val_refs: Vec<&Sample> = val.iter().collect();
    let weights = training_weights(config.variant, &train_refs, tree, config.weights)?;

    let mut state = ResumeState {
        record: RunRecord {
            fold,
            epochs: Vec::new(),
            step_losses: Vec::new(),
            best_epoch: None,
            best_val_iou: f64::NEG_INFINITY,
        },
        schedule: PlateauState::new(config.learning_rate()),
        optimizer: AdamW::new(model.store(), config.optimizer),
        params: Vec::new(),
        best_params: None,
        total_steps: 0,
    };
    if let Some(p) = paths {
        if p.state().exists() {
            let resumed: ResumeState = serde_json::from_str(&io::read_text(&p.state())?)?;
            model.store_mut().load_records(&resumed.params)?;
            info!("fold {fold}: resuming after epoch {}", resumed.record.epochs.len());
            state = resumed;
        }
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let budget_left = |steps: usize| config.max_steps.is_none_or(|m| steps < m);
    for epoch in state.record.epochs.len()..config.epochs {
        if !budget_left(state.total_steps) {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, fold, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = state.schedule.lr;
        let mut epoch_losses = Vec::with_capacity(train.len());
        let mut steps = 0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            if !budget_left(state.total_steps) {
                break;
            }
            model.store_mut().zero_grad();
            let mut batch_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train[i];
                let (image, targets) = augment(&s.image, &s.targets, tree, &config.augment, &mut rng);
                batch_losses.push(model.accumulate(&image, &targets, &weights, &config.loss)?);
            }
            let mean = mean_breakdown(&batch_losses);
            if !mean.total.is_finite() || !model.store().grads_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    batch_ids: batch.iter().map(|&i| train[i].id.clone()).collect(),
                });
            }
            model.store_mut().scale_grads(1.0 / batch.len() as f64);
            state.optimizer.update(model.store_mut(), lr);
            state.total_steps += 1;
            steps += 1;
            state.record.step_losses.push(mean.total);
            epoch_losses.extend(batch_losses);
        }
        if steps == 0 {
            break;
        }
        let train_loss = mean_breakdown(&epoch_losses);
        let val_iou = if val_refs.is_empty() {
            f64::NAN
        } else {
            mean_iou(model, &val_refs, tree, config.empty_classes)?
        };
        let val_loss = match config.schedule.monitor {
            Monitor::Validation if !val_refs.is_empty() => {
                Some(validation_loss(model, &val_refs, &weights, &config.loss)?)
            }
            _ => None,
        };
        let monitored = val_loss.unwrap_or(train_loss.total);
        observe_loss(&mut state.schedule, monitored, &config.schedule);

        let better = val_iou > state.record.best_val_iou || state.record.best_epoch.is_none();
        if better {
            state.record.best_epoch = Some(epoch);
            state.record.best_val_iou = val_iou;
            state.best_params = Some(model.store().to_records());
            if let Some(p) = paths {
                Checkpoint::capture(model, tree, &config.model, Some(epoch)).save(&p.best())?;
            }
        }
        info!(
            "fold {fold} epoch {epoch}: loss {:.5} (consistency {:.5}), val IoU {val_iou:.4}, lr {lr}",
            train_loss.total, train_loss.consistency
        );
        state.record.epochs.push(EpochRecord {
            epoch,
            lr,
            steps,
            train: train_loss,
            val_loss,
            val_iou,
        });
        if let Some(p) = paths {
            io::write_bytes(&p.log(), state.record.log_csv().as_bytes())?;
            io::write_bytes(&p.steps(), state.record.steps_csv().as_bytes())?;
            state.params = model.store().to_records();
            io::write_bytes(&p.state(), serde_json::to_string(&state)?.as_bytes())?;
            state.params.clear();
        }
    }
    let best_params = state.best_params.unwrap_or_else(|| model.store().to_records());
    Ok(FoldOutcome {
        record: state.record,
        best_params,
    })
}

pub struct CvOutcome {
    pub records: Vec<RunRecord>,
    pub validation: MetricsReport,
    pub test: Option<MetricsReport>,
}

fn write_report(dir: &Path, prefix: &str, report: &MetricsReport) -> Result<()> {
    io::write_bytes(&dir.join(format!("{prefix}_records.csv")), report.records_csv().as_bytes())?;
    io::write_bytes(&dir.join(format!("{prefix}_summary.csv")), report.summary_csv().as_bytes())?;
    io::write_bytes(&dir.join(format!("{prefix}_summary.txt")), report.table().as_bytes())
}

/// Trains every requested fold, evaluates each fold's best weights on its
/// validation split and on the held-out test set, and aggregates.
pub fn run_cv(config: &TrainConfig, dataset: &Dataset, run_dir: Option<&Path>) -> Result<CvOutcome> {
    config.validate()?;
    let tree = &dataset.tree;
    let folds = config
        .folds_to_run
        .unwrap_or(dataset.manifest.folds())
        .min(dataset.manifest.folds());
    if folds == 0 {
        return Err(Error::Validation("the fold manifest has no folds".into()));
    }
    if let Some(dir) = run_dir {
        io::write_bytes(&dir.join("config.toml"), config.to_toml().as_bytes())?;
        io::write_bytes(&dir.join("folds.csv"), dataset.manifest.to_csv().as_bytes())?;
    }
    let test_ids = dataset.manifest.test_ids();
    let test = dataset.subset(&test_ids)?;
    let test: Vec<Sample> = test.iter().map(|s| resized(s, config.image_size)).collect();
    let test_refs: Vec<&Sample> = test.iter().collect();

    let mut records = Vec::with_capacity(folds);
    let mut val_records = Vec::new();
    let mut test_records = Vec::new();
    for fold in 0..folds {
        let train = dataset.subset(&dataset.manifest.train_ids(fold))?;
        let val = dataset.subset(&dataset.manifest.val_ids(fold))?;
        let paths = run_dir.map(|d| FoldPaths::new(d, fold));
        let mut model = AnyModel::new(config.variant, tree, &config.model, model_seed(config.seed, fold));
        let outcome = train_fold(&mut model, &train, &val, tree, config, fold, paths.as_ref())?;
        model.store_mut().load_records(&outcome.best_params)?;
        let val: Vec<Sample> = val.iter().map(|s| resized(s, config.image_size)).collect();
        let val_refs: Vec<&Sample> = val.iter().collect();
        val_records.extend(evaluate(&model, &val_refs, tree, fold, config.empty_classes)?);
        test_records.extend(evaluate(&model, &test_refs, tree, fold, config.empty_classes)?);
        records.push(outcome.record);
    }
    let names = class_names(tree);
    let validation = aggregate(val_records, &names)?;
    let test = if test_records.is_empty() {
        warn!("no held-out test images; skipping the test report");
        None
    } else {
        Some(aggregate(test_records, &names)?)
    };
    if let Some(dir) = run_dir {
        write_report(dir, "val", &validation)?;
        if let Some(t) = &test {
            write_report(dir, "test", t)?;
        }
    }
    Ok(CvOutcome {
        records,
        validation,
        test,
    })
}

/// Evaluates a checkpoint on one split of a dataset and writes its reports.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    split: crate::dataprep::Split,
    policy: EmptyPolicy,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let model = checkpoint.restore(&dataset.tree)?;
    let ids: Vec<String> = dataset
        .manifest
        .assignments()
        .iter()
        .filter(|(_, s)| *s == split)
        .map(|(id, _)| id.clone())
        .collect();
    if ids.is_empty() {
        return Err(Error::Validation(format!("split '{split}' has no images")));
    }
    let samples = dataset.subset(&ids)?;
    let fold = match split {
        crate::dataprep::Split::Fold(k) => k,
        crate::dataprep::Split::Test => 0,
    };
    let report = aggregate(
        evaluate(&model, &samples, &dataset.tree, fold, policy)?,
        &class_names(&dataset.tree),
    )?;
    if let Some(dir) = out_dir {
        let prefix = match split {
            crate::dataprep::Split::Test => "test".to_string(),
            crate::dataprep::Split::Fold(k) => format!("fold{k}"),
        };
        write_report(dir, &prefix, &report)?;
    }
    Ok(report)
}
