//! Pipeline driver: synthesize phantom datasets, preprocess, train both
//! stages, detect, extract patches, evaluate, and plot.
//!
//! Configuration precedence: CLI flag > `--config` file > built-in default.
//! The effective configuration of every run is written into the run
//! directory.

mod plot;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mammil::locnet::NormKind;
use mammil::mil::AttentionKind;
use mammil::phantom::{generate_dataset, PhantomConfig};
use mammil::pipeline::{
    run_detect, run_eval, run_extract_patches, run_preprocess_cache, run_train_stage1,
    run_train_stage2, write_effective_config, PipelineConfig, RunPaths, Split,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mammil",
    version,
    about = "Two-stage weakly supervised malignancy classification: mass localization + attention MIL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Verbose logging (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset in the standard layout.
    Synth(SynthArgs),
    /// Materialize deterministic preprocessing for inspection.
    Preprocess(PreprocessArgs),
    /// Train the Stage-1 localization network for one fold.
    TrainStage1(StageArgs),
    /// Run Stage-1 detection over one split and export boxes.
    Detect(DetectArgs),
    /// Build and cache the five-patch bags for one fold (both splits).
    ExtractPatches(ExtractArgs),
    /// Train the Stage-2 MIL classifier for one fold.
    TrainStage2(Stage2Args),
    /// Evaluate a run across folds and emit the report, CSVs and plots.
    Eval(EvalArgs),
    /// Render plots from a run's evaluation CSVs.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_images: usize,
    #[arg(long, default_value_t = 0.3)]
    malignant_frac: f64,
    /// Target number of synthetic subjects (2-4 images each).
    #[arg(long, default_value_t = 60)]
    subjects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Phantom canvas height.
    #[arg(long, default_value_t = 640)]
    image_h: usize,
    /// Phantom canvas width.
    #[arg(long, default_value_t = 320)]
    image_w: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output cache directory.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every command that reads or trains a run.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON configuration file mirroring every flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic mode: canonical reduction orders everywhere.
    #[arg(long)]
    deterministic: bool,

    // Stage-1 schedule.
    #[arg(long)]
    s1_epochs: Option<usize>,
    #[arg(long)]
    s1_batch_size: Option<usize>,
    #[arg(long)]
    s1_updates_per_epoch: Option<usize>,
    #[arg(long)]
    s1_lr: Option<f64>,
    #[arg(long)]
    s1_weight_decay: Option<f64>,
    #[arg(long)]
    s1_momentum: Option<f64>,
    /// Comma-separated epochs after which the Stage-1 lr decays.
    #[arg(long, value_delimiter = ',')]
    s1_lr_decay_epochs: Option<Vec<usize>>,

    // Localization network.
    #[arg(long)]
    locnet_depth: Option<usize>,
    #[arg(long)]
    locnet_base_filters: Option<usize>,
    #[arg(long)]
    locnet_convs_per_block: Option<usize>,
    #[arg(long, value_enum)]
    locnet_norm: Option<NormArg>,

    // Composite loss.
    #[arg(long)]
    pos_weight: Option<f64>,
    #[arg(long)]
    wce_weight: Option<f64>,
    #[arg(long)]
    dice_weight: Option<f64>,
    #[arg(long)]
    dice_smooth: Option<f64>,

    // Augmentation.
    #[arg(long)]
    no_flips: bool,
    #[arg(long)]
    max_translate: Option<f64>,
    #[arg(long)]
    max_scale: Option<f64>,
    #[arg(long)]
    max_rotation: Option<f64>,

    // Stage-2 schedule.
    #[arg(long)]
    s2_epochs: Option<usize>,
    #[arg(long)]
    s2_lr: Option<f64>,
    #[arg(long)]
    s2_weight_decay: Option<f64>,
    #[arg(long)]
    s2_momentum: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    s2_lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    oversample_ratio: Option<f64>,
    /// Cap on patches per Stage-2 update (oversized bags are subsampled).
    #[arg(long)]
    max_bag_size: Option<usize>,

    // Patch encoder.
    #[arg(long, value_delimiter = ',')]
    encoder_filters: Option<Vec<usize>>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,

    // Post-processing and evaluation.
    #[arg(long)]
    binarize_threshold: Option<f64>,
    #[arg(long)]
    closing_radius: Option<u32>,
    #[arg(long)]
    min_component_area: Option<usize>,
    #[arg(long)]
    decision_threshold: Option<f64>,
    #[arg(long)]
    froc_thresholds: Option<usize>,
    #[arg(long)]
    dense_stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    Batch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AttentionArg {
    Linear,
    TanhGated,
}

impl ConfigArgs {
    /// default < config file < explicit flags.
    fn build(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $opt:expr) => {
                if let Some(v) = $opt.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.n_folds, self.folds);
        set!(cfg.seed, self.seed);
        if self.deterministic {
            cfg.deterministic = true;
        }
        set!(cfg.stage1.epochs, self.s1_epochs);
        set!(cfg.stage1.batch_size, self.s1_batch_size);
        set!(cfg.stage1.updates_per_epoch, self.s1_updates_per_epoch);
        set!(cfg.stage1.learning_rate, self.s1_lr);
        set!(cfg.stage1.weight_decay, self.s1_weight_decay);
        set!(cfg.stage1.momentum, self.s1_momentum);
        set!(cfg.stage1.lr_decay_epochs, self.s1_lr_decay_epochs);
        set!(cfg.locnet.depth, self.locnet_depth);
        set!(cfg.locnet.base_filters, self.locnet_base_filters);
        set!(cfg.locnet.convs_per_block, self.locnet_convs_per_block);
        if let Some(n) = self.locnet_norm {
            cfg.locnet.norm = match n {
                NormArg::None => NormKind::None,
                NormArg::Batch => NormKind::Batch,
            };
        }
        set!(cfg.loss.positive_class_weight, self.pos_weight);
        set!(cfg.loss.wce_weight, self.wce_weight);
        set!(cfg.loss.dice_weight, self.dice_weight);
        set!(cfg.loss.dice_smooth, self.dice_smooth);
        if self.no_flips {
            cfg.augment.enable_flips = false;
        }
        set!(cfg.augment.max_translate_frac, self.max_translate);
        set!(cfg.augment.max_scale_frac, self.max_scale);
        set!(cfg.augment.max_rotation_deg, self.max_rotation);
        cfg.augment.rng_seed = cfg.seed;
        set!(cfg.stage2.epochs, self.s2_epochs);
        set!(cfg.stage2.learning_rate, self.s2_lr);
        set!(cfg.stage2.weight_decay, self.s2_weight_decay);
        set!(cfg.stage2.momentum, self.s2_momentum);
        set!(cfg.stage2.lr_decay_epochs, self.s2_lr_decay_epochs);
        set!(cfg.stage2.oversample_ratio, self.oversample_ratio);
        if self.max_bag_size.is_some() {
            cfg.stage2.max_bag_size = self.max_bag_size;
        }
        set!(cfg.encoder.conv_filters, self.encoder_filters);
        set!(cfg.encoder.embedding_dim, self.embedding_dim);
        if let Some(a) = self.attention {
            cfg.encoder.attention = match a {
                AttentionArg::Linear => AttentionKind::Linear,
                AttentionArg::TanhGated => AttentionKind::TanhGated,
            };
        }
        set!(cfg.postprocess.binarize_threshold, self.binarize_threshold);
        set!(cfg.postprocess.closing_radius, self.closing_radius);
        set!(cfg.postprocess.min_component_area, self.min_component_area);
        set!(cfg.decision_threshold, self.decision_threshold);
        set!(cfg.froc_thresholds, self.froc_thresholds);
        set!(cfg.dense_stride, self.dense_stride);
        Ok(cfg)
    }
}

#[derive(Args)]
struct StageArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    /// Fold index in `0..folds`.
    #[arg(long)]
    fold: usize,
    #[command(flatten)]
    overrides: ConfigArgs,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    fold: usize,
    /// Which split of the fold to run detection over.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[command(flatten)]
    overrides: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    fold: usize,
    /// Dense bags are derived on the fly during training/evaluation and
    /// cannot be cached.
    #[arg(long)]
    dense: bool,
    #[command(flatten)]
    overrides: ConfigArgs,
}

#[derive(Args)]
struct Stage2Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    fold: usize,
    /// Train the dense-patch ablation instead of the two-stage pipeline.
    #[arg(long)]
    dense: bool,
    #[command(flatten)]
    overrides: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Folds to evaluate (defaults to every fold of the run).
    #[arg(long)]
    fold: Vec<usize>,
    /// Evaluate the dense-patch ablation.
    #[arg(long)]
    dense: bool,
    /// Skip plot rendering.
    #[arg(long)]
    no_plots: bool,
    #[command(flatten)]
    overrides: ConfigArgs,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dense: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::TrainStage1(args) => cmd_train_stage1(args),
        Command::Detect(args) => cmd_detect(args),
        Command::ExtractPatches(args) => cmd_extract(args),
        Command::TrainStage2(args) => cmd_train_stage2(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = PhantomConfig {
        image_size: (args.image_h, args.image_w),
        rng_seed: args.seed,
        ..Default::default()
    };
    let manifest = generate_dataset(
        &cfg,
        args.n_images,
        args.malignant_frac,
        args.subjects,
        &args.out,
    )?;
    let malignant = manifest
        .samples
        .iter()
        .filter(|s| s.record.label == mammil::Label::Malignant)
        .count();
    println!(
        "wrote {} images ({} malignant, {} subjects) to {}",
        manifest.len(),
        malignant,
        manifest.subjects().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let n = run_preprocess_cache::<mammil::PipelineFloat>(&args.data, &args.out)?;
    println!("preprocessed {n} images into {}", args.out.display());
    Ok(())
}

fn prepare_run(run: &Path, cfg: &PipelineConfig) -> Result<RunPaths> {
    let paths = RunPaths::new(run);
    std::fs::create_dir_all(run)?;
    write_effective_config(&paths, cfg)?;
    Ok(paths)
}

fn cmd_train_stage1(args: StageArgs) -> Result<()> {
    let cfg = args.overrides.build()?;
    let paths = prepare_run(&args.run, &cfg)?;
    let meta = run_train_stage1::<mammil::PipelineFloat>(&args.data, &paths, args.fold, &cfg)?;
    println!(
        "stage-1 fold {} trained ({} epochs x {} updates); checkpoint {}",
        args.fold,
        cfg.stage1.epochs,
        cfg.stage1.updates_per_epoch,
        paths.stage1_ckpt(args.fold).display()
    );
    log::info!("stage-1 parameter hash {}", meta.param_hash);
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let cfg = args.overrides.build()?;
    let paths = prepare_run(&args.run, &cfg)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let records = run_detect::<mammil::PipelineFloat>(&args.data, &paths, args.fold, split, &cfg)?;
    let boxes: usize = records.iter().map(|r| r.boxes.len()).sum();
    println!(
        "detected {boxes} boxes over {} images; wrote {}",
        records.len(),
        paths.detections(args.fold, split).display()
    );
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    if args.dense {
        bail!(
            "dense bags are built on the fly by `train-stage2 --dense` and `eval --dense`; \
             the disk cache only stores the five-patch candidate bags"
        );
    }
    let cfg = args.overrides.build()?;
    let paths = prepare_run(&args.run, &cfg)?;
    let n = run_extract_patches::<mammil::PipelineFloat>(&args.data, &paths, args.fold, &cfg)?;
    println!(
        "cached {n} bags under {}",
        paths.bags_dir(args.fold).display()
    );
    Ok(())
}

fn cmd_train_stage2(args: Stage2Args) -> Result<()> {
    let cfg = args.overrides.build()?;
    let paths = prepare_run(&args.run, &cfg)?;
    run_train_stage2::<mammil::PipelineFloat>(&args.data, &paths, args.fold, &cfg, args.dense)?;
    println!(
        "stage-2 fold {}{} trained; checkpoint {}",
        args.fold,
        if args.dense { " (dense ablation)" } else { "" },
        paths.stage2_ckpt(args.fold, args.dense).display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.overrides.build()?;
    let paths = prepare_run(&args.run, &cfg)?;
    let folds: Vec<usize> = if args.fold.is_empty() {
        (0..cfg.n_folds).collect()
    } else {
        args.fold.clone()
    };
    let report = run_eval::<mammil::PipelineFloat>(&args.data, &paths, &folds, &cfg, args.dense)?;

    println!(
        "detection over {} fold(s): precision {:.3} +- {:.3}, recall {:.3} +- {:.3}",
        folds.len(),
        report.detection.mean_precision,
        report.detection.std_precision,
        report.detection.mean_recall,
        report.detection.std_recall
    );
    let c = &report.classification;
    println!(
        "classification: Sens {:.3} +- {:.3}  Spec {:.3} +- {:.3}  B.Acc {:.3} +- {:.3}  AUC {:.3} +- {:.3}",
        c.mean.sensitivity,
        c.std.sensitivity,
        c.mean.specificity,
        c.std.specificity,
        c.mean.balanced_accuracy,
        c.std.balanced_accuracy,
        c.mean.auc,
        c.std.auc
    );
    println!(
        "report: {}",
        paths.eval_dir(args.dense).join("report.json").display()
    );
    if !args.no_plots {
        render_plots(&paths, args.dense)?;
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let paths = RunPaths::new(&args.run);
    render_plots(&paths, args.dense)
}

fn render_plots(paths: &RunPaths, dense: bool) -> Result<()> {
    let eval_dir = paths.eval_dir(dense);
    let roc_path = eval_dir.join("roc.csv");
    if !roc_path.exists() {
        bail!(
            "no evaluation CSVs under {}; run `eval` first",
            eval_dir.display()
        );
    }
    let by_fold = |cols: &(Vec<String>, Vec<Vec<f64>>), xi: usize, yi: usize| {
        let folds: Vec<usize> = {
            let mut f: Vec<usize> = cols.1[0].iter().map(|v| *v as usize).collect();
            f.sort_unstable();
            f.dedup();
            f
        };
        folds
            .iter()
            .map(|&fid| plot::Series {
                label: format!("fold{fid}"),
                color: plot::PALETTE[fid % plot::PALETTE.len()],
                points: cols.1[0]
                    .iter()
                    .zip(cols.1[xi].iter().zip(cols.1[yi].iter()))
                    .filter(|(f, _)| **f as usize == fid)
                    .map(|(_, (x, y))| (*x, *y))
                    .collect(),
            })
            .collect::<Vec<_>>()
    };

    let roc = plot::read_csv_columns(&roc_path)?;
    plot::line_plot(&eval_dir.join("roc.png"), &by_fold(&roc, 2, 3), (640, 480))?;
    let froc = plot::read_csv_columns(&eval_dir.join("froc.csv"))?;
    plot::line_plot(&eval_dir.join("froc.png"), &by_fold(&froc, 2, 3), (640, 480))?;

    // Loss curves for whichever folds have logs.
    let mut fold = 0usize;
    let mut series1 = Vec::new();
    let mut series2 = Vec::new();
    loop {
        let s1 = paths.stage1_loss(fold);
        let s2 = paths.stage2_loss(fold, dense);
        if !s1.exists() && !s2.exists() {
            break;
        }
        if s1.exists() {
            let cols = plot::read_csv_columns(&s1)?;
            series1.push(plot::Series {
                label: format!("fold{fold}"),
                color: plot::PALETTE[fold % plot::PALETTE.len()],
                points: cols.1[0]
                    .iter()
                    .cloned()
                    .zip(cols.1[2].iter().cloned())
                    .collect(),
            });
        }
        if s2.exists() {
            let cols = plot::read_csv_columns(&s2)?;
            series2.push(plot::Series {
                label: format!("fold{fold}"),
                color: plot::PALETTE[fold % plot::PALETTE.len()],
                points: cols.1[0]
                    .iter()
                    .cloned()
                    .zip(cols.1[2].iter().cloned())
                    .collect(),
            });
        }
        fold += 1;
    }
    if !series1.is_empty() {
        plot::line_plot(&eval_dir.join("stage1_loss.png"), &series1, (640, 480))?;
    }
    if !series2.is_empty() {
        plot::line_plot(&eval_dir.join("stage2_loss.png"), &series2, (640, 480))?;
    }
    println!("plots written under {}", eval_dir.display());
    Ok(())
}
