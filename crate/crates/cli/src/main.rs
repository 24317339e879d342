//! `woundstage`: the analysis pipeline as subcommands sharing one TOML config.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use woundstage::config::{ConfigError, RunConfig};
use woundstage::datapipe::{load_dataset, load_manifest, prepare, read_rgb, resolve_path, Label};
use woundstage::explain::{explain_image, write_outputs, ExplainError};
use woundstage::fiberquant::{
    measure_manifest, read_coherency_csv, summarize, write_coherency_csv, FiberError,
};
use woundstage::network::{
    build_model, load_checkpoint, load_checkpoint_for, save_checkpoint, NetworkError,
};
use woundstage::synth::{generate, SynthKind, SynthOptions};
use woundstage::tensor::TensorError;
use woundstage::trainer::{evaluate, train, write_report, MetricError, TrainError};

#[derive(Debug, Parser)]
#[command(
    name = "woundstage",
    version,
    about = "Wound-healing stage classification and collagen coherency analysis"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (overrides `paths.output_root`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// `target` (six stage-like classes) or `source` (pretraining task).
        #[arg(long, default_value = "target")]
        kind: SynthKind,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 80)]
        size: u32,
        /// Destination (defaults to `paths.data_root`).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Split, augment, resize and balance a dataset.
    Prepare {
        /// Input manifest (defaults to `<data_root>/manifest.csv`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model, from scratch or by fine-tuning a pretrained checkpoint.
    Train {
        /// Training manifest (defaults to the prepared training set).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Validation manifest (defaults to the prepared validation set if present).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Skip validation even if a validation set exists.
        #[arg(long)]
        no_val: bool,
        /// Checkpoint to fine-tune; its head is replaced and early blocks frozen.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        freeze_blocks: Option<usize>,
        /// Subdirectory of the output root receiving the checkpoints.
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        /// Defaults to `<out>/train/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the prepared test set.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write LayerCAM, fused saliency and overlay images.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the prepared test set.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Explain at most this many images, in manifest order.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Measure collagen fiber coherency for every image in a manifest.
    Coherency {
        /// Defaults to `<data_root>/manifest.csv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Per-group coherency statistics and pairwise Welch t-tests.
    Stats {
        /// Defaults to `<out>/coherency/coherency.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

/// Command-line misuse detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite(_) => 3,
        _ => 2,
    }
}

fn network_code(e: &NetworkError) -> u8 {
    match e {
        NetworkError::FreezeOutOfRange { .. } | NetworkError::InvalidConfig(_) => 1,
        NetworkError::Tensor(t) => tensor_code(t),
        _ => 2,
    }
}

/// Maps an error to the exit status by the first classifiable cause.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor_code(e);
        }
        if let Some(e) = cause.downcast_ref::<NetworkError>() {
            return network_code(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricError>() {
            return if matches!(e, MetricError::NonFinite) {
                3
            } else {
                2
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::InvalidHyperParams(_) => 1,
                TrainError::Tensor(t) => tensor_code(t),
                TrainError::Network(n) => network_code(n),
                TrainError::Metric(MetricError::NonFinite) => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<ExplainError>() {
            return match e {
                ExplainError::LayerOutOfRange { .. }
                | ExplainError::NotSpatial { .. }
                | ExplainError::ClassOutOfRange { .. }
                | ExplainError::BadAlpha(_) => 1,
                ExplainError::Tensor(t) => tensor_code(t),
                ExplainError::Network(n) => network_code(n),
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<FiberError>() {
            return match e {
                FiberError::BadSigma(_) => 1,
                FiberError::Degenerate(_) | FiberError::EmptyMask => 3,
                FiberError::Pair { source, .. }
                    if matches!(**source, FiberError::Degenerate(_)) =>
                {
                    3
                }
                _ => 2,
            };
        }
    }
    2
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn out(&self, sub: &str) -> PathBuf {
        self.cfg.paths.output_root.join(sub)
    }

    fn data_manifest(&self) -> PathBuf {
        self.cfg.paths.data_root.join("manifest.csv")
    }

    fn prepared(&self, part: &str) -> PathBuf {
        self.out("prepare")
            .join("prepared")
            .join(format!("{part}.csv"))
    }

    fn class_names(&self) -> Vec<String> {
        (0..self.cfg.model.num_classes)
            .map(|i| {
                Label::from_index(i).map_or_else(|| format!("class{i}"), |l| l.name().to_string())
            })
            .collect()
    }

    /// Creates `dir` and records the effective configuration in it.
    fn output_dir(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.out(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.cfg.to_toml())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(dir)
    }

    fn dataset(&self, path: &Path) -> Result<woundstage::datapipe::Dataset> {
        require(path)?;
        let ds = load_dataset(
            path,
            self.cfg.model.input_size as u32,
            &self.cfg.data.normalization,
        )
        .with_context(|| format!("loading dataset {}", path.display()))?;
        info!("{}: {} images", path.display(), ds.len());
        Ok(ds)
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("missing input: {}", path.display());
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.output_root = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Train {
        epochs,
        learning_rate,
        batch_size,
        freeze_blocks,
        ..
    } = &cli.command
    {
        cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
        cfg.train.learning_rate = learning_rate.unwrap_or(cfg.train.learning_rate);
        cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
        cfg.train.freeze_blocks = freeze_blocks.unwrap_or(cfg.train.freeze_blocks);
    }
    if let Command::Explain {
        layer,
        class,
        alpha,
        ..
    } = &cli.command
    {
        cfg.explain.layer = layer.or(cfg.explain.layer);
        cfg.explain.class = class.or(cfg.explain.class);
        cfg.explain.alpha = alpha.unwrap_or(cfg.explain.alpha);
    }
    if let Command::Coherency { sigma: Some(s), .. } = &cli.command {
        cfg.fiberquant.sigma = *s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        cfg: load_config(&cli)?,
    };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),

        Command::Synth {
            kind,
            per_class,
            size,
            dir,
        } => {
            if per_class == 0 {
                return Err(usage("--per-class must be at least 1"));
            }
            if size < 8 {
                return Err(usage("--size must be at least 8"));
            }
            let dir = dir.unwrap_or_else(|| cfg.paths.data_root.clone());
            let mut opts = SynthOptions::uniform(kind, per_class, cfg.seed);
            opts.size = size;
            let manifest = generate(&dir, &opts)
                .with_context(|| format!("writing dataset to {}", dir.display()))?;
            println!(
                "wrote {} images; manifest {}",
                per_class * Label::COUNT,
                manifest.display()
            );
        }

        Command::Prepare { manifest } => {
            let manifest = manifest.unwrap_or_else(|| ctx.data_manifest());
            require(&manifest)?;
            let dir = ctx.output_dir("prepare")?;
            let summary = prepare(&manifest, &dir, &cfg.prepare_options())
                .with_context(|| format!("preparing {}", manifest.display()))?;
            println!("class,training,validation,testing,augmented_training,balanced_training");
            for c in &summary.classes {
                println!(
                    "{},{},{},{},{},{}",
                    c.class,
                    c.training,
                    c.validation,
                    c.testing,
                    c.augmented_training,
                    c.balanced_training
                );
            }
        }

        Command::Train {
            manifest,
            val,
            no_val,
            pretrained,
            name,
            ..
        } => {
            let train_path = manifest.unwrap_or_else(|| ctx.prepared("train"));
            let train_set = ctx.dataset(&train_path)?;
            let val_path = if no_val {
                None
            } else {
                match val {
                    Some(v) => Some(v),
                    None => Some(ctx.prepared("val")).filter(|p| p.exists()),
                }
            };
            let val_set = val_path.as_deref().map(|p| ctx.dataset(p)).transpose()?;
            let hp = cfg.hyper_params();
            let model_config = cfg.model_config();
            let model = match &pretrained {
                Some(path) => {
                    require(path)?;
                    let base = load_checkpoint(path)
                        .with_context(|| format!("loading {}", path.display()))?;
                    if base.config.input_size != model_config.input_size
                        || base.config.preset != model_config.preset
                    {
                        return Err(usage(format!(
                            "{} is a {:?} model at input {}, config asks for {:?} at {}",
                            path.display(),
                            base.config.preset,
                            base.config.input_size,
                            model_config.preset,
                            model_config.input_size
                        )));
                    }
                    base.finetune_surgery(
                        hp.freeze_blocks,
                        model_config.num_classes,
                        cfg.init_seed(),
                    )?
                }
                None => build_model(model_config, cfg.init_seed())?,
            };
            let dir = ctx.output_dir(&name)?;
            save_checkpoint(&model, dir.join("init.ckpt"))?;
            let outcome = train(model, &train_set, val_set.as_ref(), &hp)?;
            save_checkpoint(&outcome.best, dir.join("best.ckpt"))?;
            save_checkpoint(&outcome.last, dir.join("last.ckpt"))?;
            outcome.history.write_csv(&dir.join("history.csv"))?;
            match outcome.best_epoch {
                Some(e) => println!("best epoch {e}; checkpoints in {}", dir.display()),
                None => println!("no epochs run; checkpoints in {}", dir.display()),
            }
        }

        Command::Eval {
            checkpoint,
            manifest,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| ctx.out("train").join("best.ckpt"));
            require(&ckpt)?;
            let model = load_checkpoint_for(&ckpt, &cfg.model_config())
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = ctx.dataset(&manifest.unwrap_or_else(|| ctx.prepared("test")))?;
            let report = evaluate(&model, &ds, &ctx.class_names())?;
            let dir = ctx.output_dir("eval")?;
            write_report(&report, &dir.join("report.json"))?;
            let auc = report
                .macro_auc
                .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "overall accuracy {:.4}, mean class accuracy {:.4}, macro AUC {auc}",
                report.overall_acc, report.mean_acc
            );
        }

        Command::Explain {
            checkpoint,
            manifest,
            limit,
            ..
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| ctx.out("train").join("best.ckpt"));
            require(&ckpt)?;
            let model = load_checkpoint_for(&ckpt, &cfg.model_config())
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let manifest_path = manifest.unwrap_or_else(|| ctx.prepared("test"));
            require(&manifest_path)?;
            let samples = load_manifest(&manifest_path)?;
            let layer = cfg
                .explain
                .layer
                .unwrap_or_else(|| model.default_explain_layer());
            let dir = ctx.output_dir("explain")?;
            let mut written = 0;
            for s in samples.samples.iter().take(limit) {
                let path = resolve_path(&manifest_path, &s.image_path);
                let image = read_rgb(&path)?;
                let e = explain_image(
                    &model,
                    &image,
                    &cfg.data.normalization,
                    cfg.explain.class,
                    layer,
                    cfg.explain.alpha,
                )
                .with_context(|| format!("explaining {}", path.display()))?;
                let id = path
                    .file_stem()
                    .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
                write_outputs(&dir, &id, &e.map, &e.saliency, &e.overlay)?;
                written += 1;
            }
            println!(
                "explained {written} images at layer {layer}; outputs in {}",
                dir.display()
            );
        }

        Command::Coherency { manifest, .. } => {
            let manifest = manifest.unwrap_or_else(|| ctx.data_manifest());
            require(&manifest)?;
            let records =
                measure_manifest(&manifest, &cfg.fiberquant.thresholds, cfg.fiberquant.sigma)?;
            let dir = ctx.output_dir("coherency")?;
            let out = dir.join("coherency.csv");
            write_coherency_csv(&records, &out)?;
            let empty = records.iter().filter(|r| r.coherency.is_none()).count();
            println!(
                "measured {} images ({empty} with an empty mask); {}",
                records.len(),
                out.display()
            );
        }

        Command::Stats { input } => {
            let input = input.unwrap_or_else(|| ctx.out("coherency").join("coherency.csv"));
            require(&input)?;
            let records = read_coherency_csv(&input)?;
            let report = summarize(&records)?;
            let dir = ctx.output_dir("stats")?;
            report.write(&dir)?;
            print!("{}", report.group_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
