//! `hierseg`: prepare datasets, train, evaluate and render overlays.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.

mod overlay;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use hierseg::dataprep::dataset::{
    load_tree, load_tree_files, prepare_dataset, stats_csv, Dataset, PrepareOptions, CLASS_MAP_FILE, CLASS_TREE_FILE,
};
use hierseg::dataprep::{io, PriorityOrder, Split};
use hierseg::hierarchy::{tl_pano_tree, ClassTree};
use hierseg::metrics::EmptyPolicy;
use hierseg::model::{Checkpoint, Segmenter, Variant};
use hierseg::synthetic::{generate, SyntheticSpec};
use hierseg::trainer::{evaluate_checkpoint, run_cv, Monitor, TrainConfig};
use hierseg::Error;

use crate::overlay::Palette;

const DATA_ROOT_ENV: &str = "HIERSEG_DATA_ROOT";

/// Like `print!`, but a closed stdout (e.g. piping into `head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "hierseg", version, about = "Restrictive hierarchical semantic segmentation")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize polygon annotations into masks, assign folds and compute class weights.
    Prepare(PrepareArgs),
    /// Train with k-fold cross-validation and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a prepared dataset.
    Eval(EvalArgs),
    /// Render predictions over the input images.
    Overlay(OverlayArgs),
    /// Generate a synthetic two-level dataset in the raw annotation layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// VIA annotation JSON file, or a directory of them.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory holding the annotated images [default: `images` next to the annotations].
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output directory for the prepared dataset.
    #[arg(long)]
    out: PathBuf,
    /// Class map CSV [default: class_map.csv next to the annotations, else the built-in TL-pano map].
    #[arg(long, requires = "class_tree")]
    class_map: Option<PathBuf>,
    /// Class tree JSON [default: class_tree.json next to the annotations].
    #[arg(long, requires = "class_map")]
    class_tree: Option<PathBuf>,
    /// Region attribute holding the class name.
    #[arg(long, default_value = "class")]
    class_key: String,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Fraction of images held out as the test set.
    #[arg(long, default_value_t = 0.10)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overlap priority, highest first, comma separated [default: Composite,Enamel,Pulp,Dentin,Upper,Lower].
    #[arg(long, value_delimiter = ',')]
    priority: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Baseline,
    Hierarchical,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Hierarchical => Variant::Hierarchical,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MonitorArg {
    Train,
    Validation,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML configuration; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared dataset directory.
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    /// Run directory; an interrupted run in it is resumed.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    backbone: Option<String>,
    /// Number of folds to train, starting at fold 0.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Starting learning rate [default: 0.018 baseline, 0.022 hierarchical].
    #[arg(long)]
    lr: Option<f64>,
    /// Stop each fold after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Resample images to this square size (multiple of 4).
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability threshold for restriction, consistency gating and prediction.
    #[arg(long)]
    threshold: Option<f64>,
    /// Constant inside the log-parent shift of the conditional softmax.
    #[arg(long)]
    eps: Option<f64>,
    /// Loss that drives the plateau schedule.
    #[arg(long, value_enum)]
    monitor: Option<MonitorArg>,
    /// Turn off all augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory.
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Fold whose validation split is scored with `--split val`.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Directory for the per-image and summary reports.
    #[arg(long)]
    out: PathBuf,
    /// Skip classes absent from both prediction and target instead of scoring them 1.
    #[arg(long)]
    skip_empty: bool,
}

#[derive(Args, Debug)]
struct OverlayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON object mapping class names to `[r, g, b]` or `"#rrggbb"`.
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Opacity of class colors.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Side length of the square images.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
    /// Child classes inside each blob.
    #[arg(long, default_value_t = 3)]
    children: usize,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    #[arg(long, default_value_t = 2)]
    max_shapes: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn config_keys_help() -> String {
    format!(
        "Configuration file keys and their defaults. Unknown keys are rejected.\n\
         Optional keys, unset by default: learning_rate (0.018 for the baseline,\n\
         0.022 for the hierarchical variant), image_size (native size),\n\
         max_steps (no limit), folds_to_run (every fold).\n\n{}",
        TrainConfig::default().to_toml()
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFinite { .. }) => 4,
        Some(_) => 3,
        None if err.downcast_ref::<ConfigError>().is_some() => 2,
        None => 3,
    }
}

/// A configuration problem detected in the driver itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

fn config_error(message: impl Into<String>) -> anyhow::Error {
    ConfigError(message.into()).into()
}

fn main() -> ExitCode {
    let command = Cli::command().mut_subcommand("train", |c| c.after_long_help(config_keys_help()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        (false, _) => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Overlay(args) => cmd_overlay(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", error_chain(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn error_chain(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let message = cause.to_string();
        if !text.ends_with(&message) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&message);
        }
    }
    text
}

fn sibling_dir(annotations: &Path) -> PathBuf {
    if annotations.is_dir() {
        annotations.to_path_buf()
    } else {
        annotations.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn prepare_tree(args: &PrepareArgs) -> anyhow::Result<ClassTree> {
    if let (Some(map), Some(tree)) = (&args.class_map, &args.class_tree) {
        return Ok(load_tree_files(map, tree)?);
    }
    let dir = sibling_dir(&args.annotations);
    if dir.join(CLASS_MAP_FILE).is_file() && dir.join(CLASS_TREE_FILE).is_file() {
        info!("using the class tree in {}", dir.display());
        return Ok(load_tree(&dir)?);
    }
    info!("no class tree given; using the built-in TL-pano hierarchy");
    Ok(tl_pano_tree())
}

fn cmd_prepare(args: PrepareArgs) -> anyhow::Result<()> {
    if !args.annotations.exists() {
        return Err(Error::Validation(format!("{} does not exist", args.annotations.display())).into());
    }
    let tree = prepare_tree(&args)?;
    let images = args.images.clone().unwrap_or_else(|| sibling_dir(&args.annotations).join("images"));
    let options = PrepareOptions {
        class_key: args.class_key.clone(),
        folds: args.folds,
        holdout: args.holdout,
        seed: args.seed,
        priority: args.priority.clone().unwrap_or_else(|| PriorityOrder::tl_pano().0),
        ..PrepareOptions::default()
    };
    let summary = prepare_dataset(&args.annotations, &images, &tree, &args.out, &options)?;
    outln!(
        "prepared {} images into {} ({} test, {} folds)",
        summary.images,
        args.out.display(),
        summary.manifest.test_ids().len(),
        summary.manifest.folds()
    );
    out!("{}", stats_csv(&summary.stats));
    Ok(())
}

fn build_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_toml(&io::read_text(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.variant {
        config.variant = v.into();
    }
    if let Some(b) = &args.backbone {
        config.backbone = b.clone();
    }
    config.folds_to_run = args.folds.or(config.folds_to_run);
    config.epochs = args.epochs.unwrap_or(config.epochs);
    config.batch_size = args.batch_size.unwrap_or(config.batch_size);
    config.learning_rate = args.lr.or(config.learning_rate);
    config.max_steps = args.max_steps.or(config.max_steps);
    config.image_size = args.image_size.or(config.image_size);
    config.seed = args.seed.unwrap_or(config.seed);
    if let Some(t) = args.threshold {
        config.loss.threshold = t;
        config.model.composition.threshold = t;
    }
    if let Some(eps) = args.eps {
        config.model.composition.eps = eps;
    }
    if let Some(m) = args.monitor {
        config.schedule.monitor = match m {
            MonitorArg::Train => Monitor::Train,
            MonitorArg::Validation => Monitor::Validation,
        };
    }
    if args.no_augment {
        config.augment = hierseg::dataprep::AugmentConfig::identity();
    }
    // Pin the variant's starting rate so the snapshot records it.
    config.learning_rate = Some(config.learning_rate());
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let config = build_config(&args)?;
    if !args.data.is_dir() {
        return Err(Error::Validation(format!("dataset directory {} does not exist", args.data.display())).into());
    }
    let dataset = Dataset::load(&args.data)?;
    let snapshot = args.out.join("config.toml");
    if snapshot.is_file() {
        let previous = TrainConfig::from_toml(&io::read_text(&snapshot)?)?;
        if previous != config {
            return Err(config_error(format!(
                "{} holds a run with a different configuration; choose another --out",
                args.out.display()
            )));
        }
        info!("resuming the run in {}", args.out.display());
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let outcome = run_cv(&config, &dataset, Some(&args.out))?;
    for record in &outcome.records {
        let last = record.epochs.last();
        outln!(
            "fold {}: {} epochs, {} steps, final loss {:.5}, best val IoU {:.4} at epoch {}",
            record.fold,
            record.epochs.len(),
            record.step_losses.len(),
            last.map_or(f64::NAN, |e| e.train.total),
            record.best_val_iou,
            record.best_epoch.map_or("-".to_string(), |e| e.to_string())
        );
    }
    outln!("validation\n{}", outcome.validation.table());
    if let Some(test) = &outcome.test {
        outln!("test\n{}", test.table());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let split = match args.split {
        SplitArg::Test => Split::Test,
        SplitArg::Val => Split::Fold(args.fold),
    };
    let policy = if args.skip_empty { EmptyPolicy::Skip } else { EmptyPolicy::One };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let report = evaluate_checkpoint(&checkpoint, &dataset, split, policy, Some(&args.out))?;
    outln!("{}", report.table());
    Ok(())
}

fn image_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG images in {}", path.display());
    }
    Ok(files)
}

fn cmd_overlay(args: OverlayArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(config_error(format!("alpha {} outside [0, 1]", args.alpha)));
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let tree = checkpoint.tree()?;
    let model = checkpoint.restore(&tree)?;
    let mut palette = Palette::for_tree(&tree);
    if let Some(path) = &args.palette {
        palette
            .apply_overrides(&io::read_text(path)?, &tree)
            .map_err(|e| config_error(format!("{}: {e:#}", path.display())))?;
    }
    let priority = PriorityOrder::tl_pano();
    for file in image_files(&args.images)? {
        let image = io::read_gray_image(&file)?;
        let pred = model.predict(&image)?;
        let labels = overlay::label_map(&pred, &tree, &palette, &priority);
        let name = file.file_name().ok_or_else(|| anyhow!("{} has no file name", file.display()))?;
        let target = args.out.join(name).with_extension("png");
        overlay::save(&overlay::render(&image, &labels, &palette, args.alpha), &target)?;
        info!("wrote {}", target.display());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        image_size: args.size,
        images: args.images,
        min_shapes: args.min_shapes,
        max_shapes: args.max_shapes,
        children: args.children,
        noise: args.noise,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    for v in hierseg::hierarchy::validate_hierarchy(&data.tree) {
        warn!("{v}");
    }
    data.write(&args.out)?;
    outln!("wrote {} synthetic images to {}", data.images.len(), args.out.display());
    Ok(())
}
