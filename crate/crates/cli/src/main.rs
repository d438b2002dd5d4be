//! `dfkit` command suite: prepare, train, sweep, evaluate, gradcam, profile,
//! report. Exit codes: 0 success, 1 validation error, 2 runtime failure.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{
    parse_arch, parse_init, resolve_run_spec, resolve_sweep_grid, SweepFile, SweepOverrides,
    TrainFile, TrainOverrides,
};
use dfkit::data::{
    derive_validation_split, load_manifest_with, no_skill_baseline, write_atomic, Label,
    LoadOptions, Split, SplitAssignments, SplitSpec,
};
use dfkit::error::{Error, Result};
use dfkit::explain::{gradcam, overlay, write_heatmap_npy, Colormap};
use dfkit::metrics::{
    bootstrap_ci, evaluate, write_predictions, write_report, BootstrapMetric, ScoredPrediction,
};
use dfkit::model::checkpoint::load_detector;
use dfkit::model::{build_detector, Detector, DetectorConfig};
use dfkit::preprocess::{
    build_cache, eval_transform, eval_view, open_for_training, PreprocessConfig,
};
use dfkit::profile::{profile_detector, render_table, write_profile, ProfileReport};
use dfkit::report::render_report;
use dfkit::sweep::{emit_table, run_sweep, TABLE_CSV, TABLE_TXT};
use dfkit::train::train;

pub const CACHE_ROOT_ENV: &str = "DFKIT_CACHE_ROOT";

#[derive(Parser)]
#[command(name = "dfkit", version, about = "Deepfake image detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest, build the resized image cache, and derive the
    /// persistent validation split.
    Prepare(PrepareArgs),
    /// Finetune one detector configuration.
    Train(TrainArgs),
    /// Run the hyperparameter grid and emit the accuracy table.
    Sweep(SweepArgs),
    /// Score a split with a checkpoint and write the metric bundle.
    Evaluate(EvaluateArgs),
    /// Write class-activation overlays for selected images.
    Gradcam(GradcamArgs),
    /// Parameter/FLOP/latency report for a model.
    Profile(ProfileArgs),
    /// Markdown summary of a run or sweep directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Manifest CSV (path,label,split)
    #[arg(long)]
    manifest: PathBuf,
    /// Image root directory (defaults to the manifest's directory)
    #[arg(long)]
    root: Option<PathBuf>,
    /// Cache directory (defaults to $DFKIT_CACHE_ROOT)
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Decode every image during validation
    #[arg(long, default_value_t = true)]
    validate_images: bool,
    #[arg(long, default_value_t = 384)]
    cache_short_side: u32,
    /// Fraction of train reserved for validation
    #[arg(long, default_value_t = 0.10)]
    val_fraction: f64,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
    /// Disable stratified carve-out
    #[arg(long)]
    no_stratify: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; flags override file keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    cache_root: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    freeze_backbone: Option<bool>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    /// cosine or step
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    step_factor: Option<f64>,
    #[arg(long)]
    step_period: Option<usize>,
    #[arg(long)]
    eta_min_ratio: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    t_mult: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_short_side: Option<u32>,
    #[arg(long)]
    crop_low: Option<f64>,
    #[arg(long)]
    crop_high: Option<f64>,
    /// short_side or area
    #[arg(long)]
    crop_mode: Option<String>,
    #[arg(long)]
    train_side: Option<u32>,
    #[arg(long)]
    eval_side: Option<u32>,
    /// imagenet, clip, or auto
    #[arg(long)]
    normalization: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML grid config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep output directory
    #[arg(long)]
    out: PathBuf,
    /// Skip cells that already completed
    #[arg(long)]
    resume: bool,
    /// Comma-separated architecture axis
    #[arg(long)]
    archs: Option<String>,
    #[arg(long)]
    inits: Option<String>,
    #[arg(long)]
    schedulers: Option<String>,
    #[arg(long)]
    lrs: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    cache_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Runs per cell; above one, the table reports mean ± sd over seeds
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    freeze_backbone: Option<bool>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    no_stratify: bool,
    #[arg(long)]
    cache_short_side: Option<u32>,
    #[arg(long)]
    train_side: Option<u32>,
    #[arg(long)]
    eval_side: Option<u32>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// train, val, or test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 256)]
    eval_side: u32,
    #[arg(long)]
    cache_root: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Bootstrap resamples for confidence intervals (0 = off)
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 42)]
    bootstrap_seed: u64,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// fake, real, or predicted
    #[arg(long, default_value = "predicted")]
    class: String,
    #[arg(long, default_value = "blue")]
    colormap: String,
    #[arg(long, default_value_t = 0.5)]
    blend: f32,
    #[arg(long, default_value_t = 256)]
    eval_side: u32,
    #[arg(long)]
    cache_root: Option<PathBuf>,
    /// Manifest ids (paths) to explain
    #[arg(required = true)]
    ids: Vec<String>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Profile a trained checkpoint...
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// ...or a freshly built arch/init pair
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value = "random")]
    init: String,
    #[arg(long, default_value_t = 224)]
    input_side: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or sweep directory
    #[arg(long)]
    dir: PathBuf,
    /// Output markdown file (defaults to <dir>/report.md)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gradcam(args) => cmd_gradcam(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 for configuration/input validation problems, 2 for runtime failures.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::Parse { .. }
        | Error::ManifestNotFound(_)
        | Error::EmptyManifest
        | Error::MalformedRow { .. }
        | Error::UnknownToken { .. }
        | Error::DuplicateId(_)
        | Error::ValSplitPopulated(_)
        | Error::TrainTooSmall(_)
        | Error::EmptySplit(_)
        | Error::ConfigMismatch(_)
        | Error::EmptyAxis(_)
        | Error::EmptyPredictions
        | Error::ScoreOutOfRange { .. }
        | Error::TooFewResamples { .. }
        | Error::LatencyConfig { .. }
        | Error::NotEnoughCells { .. } => 1,
        _ => 2,
    }
}

fn default_root(manifest: &Path, root: Option<PathBuf>) -> PathBuf {
    root.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn env_cache_root(cli_value: Option<PathBuf>) -> Option<PathBuf> {
    cli_value.or_else(|| std::env::var_os(CACHE_ROOT_ENV).map(PathBuf::from))
}

/// Echo the resolved configuration into the output directory before any
/// side effects, so every artifact is auditable.
fn echo_config<T: serde::Serialize>(dir: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let toml = toml::to_string_pretty(resolved)
        .map_err(|e| Error::InvalidConfig(format!("serialize resolved config: {e}")))?;
    write_atomic(&dir.join("resolved_config.toml"), toml.as_bytes())
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let root = default_root(&args.manifest, args.root.clone());
    let cache_dir = env_cache_root(args.cache_dir.clone()).ok_or_else(|| {
        Error::InvalidConfig(format!("no cache dir (--cache-dir or ${CACHE_ROOT_ENV})"))
    })?;
    let split_spec = SplitSpec {
        val_fraction_of_train: args.val_fraction,
        seed: args.split_seed,
        stratified: !args.no_stratify,
    };

    let manifest = load_manifest_with(
        &args.manifest,
        &root,
        LoadOptions {
            validate_images: args.validate_images,
        },
    )?;
    let derived = derive_validation_split(&manifest, &split_spec)?;

    #[derive(serde::Serialize)]
    struct Resolved<'a> {
        manifest: &'a Path,
        root: &'a Path,
        cache_short_side: u32,
        validate_images: bool,
        split: SplitSpec,
    }
    echo_config(
        &cache_dir,
        &Resolved {
            manifest: &args.manifest,
            root: &root,
            cache_short_side: args.cache_short_side,
            validate_images: args.validate_images,
            split: split_spec,
        },
    )?;

    let mut pp = PreprocessConfig::default();
    pp.cache_short_side = args.cache_short_side;
    let written = build_cache(&derived, &cache_dir, &pp)?;
    let splits = SplitAssignments::from_manifest(&derived, &split_spec);
    splits.save(&cache_dir.join("splits.json"))?;

    println!(
        "cached {written} new image(s) into {}; splits: train {}, val {}, test {}",
        cache_dir.display(),
        derived.split_count(Split::Train),
        derived.split_count(Split::Val),
        derived.split_count(Split::Test),
    );
    println!(
        "no-skill baseline accuracy on test: {:.4}",
        no_skill_baseline(&derived)?
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => Some(TrainFile::load(path)?),
        None => None,
    };
    let flags = TrainOverrides {
        arch: args.arch,
        init: args.init,
        freeze_backbone: args.freeze_backbone,
        dropout_rate: args.dropout_rate,
        lr0: args.lr0,
        scheduler: args.scheduler,
        step_factor: args.step_factor,
        step_period: args.step_period,
        eta_min_ratio: args.eta_min_ratio,
        t0: args.t0,
        t_mult: args.t_mult,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed: args.seed,
        cache_short_side: args.cache_short_side,
        crop_low: args.crop_low,
        crop_high: args.crop_high,
        crop_mode: args.crop_mode,
        train_side: args.train_side,
        eval_side: args.eval_side,
        normalization: args.normalization,
        manifest: args.manifest,
        root: args.root,
        splits: args.splits,
        cache_root: env_cache_root(args.cache_root),
        run_dir: args.run_dir,
    };
    let spec = resolve_run_spec(file, flags)?;
    // train() snapshots the resolved config into the run dir before work
    let result = train(&spec)?;
    println!(
        "run {}: best val accuracy {:.4} at epoch {}{}; checkpoint {}",
        spec.run_dir.display(),
        result.best_val_accuracy,
        result.best_epoch,
        if result.stopped_early { " (early stop)" } else { "" },
        result.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => SweepFile::load(path)?,
        None => SweepFile::default(),
    };
    let flags = SweepOverrides {
        archs: args.archs,
        inits: args.inits,
        schedulers: args.schedulers,
        lrs: args.lrs,
        manifest: args.manifest,
        root: args.root,
        cache_root: env_cache_root(args.cache_root),
        seed: args.seed,
        seeds_per_cell: args.seeds,
        max_epochs: args.max_epochs,
        batch_size: args.batch_size,
        patience: args.patience,
        weight_decay: args.weight_decay,
        freeze_backbone: args.freeze_backbone,
        dropout_rate: args.dropout_rate,
        val_fraction: args.val_fraction,
        split_seed: args.split_seed,
        no_stratify: args.no_stratify,
        cache_short_side: args.cache_short_side,
        train_side: args.train_side,
        eval_side: args.eval_side,
    };
    let grid = resolve_sweep_grid(file, flags)?;
    echo_config(&args.out, &grid)?;
    let results = run_sweep(&grid, &args.out, args.resume)?;
    let (csv, txt) = emit_table(&results)?;
    write_atomic(&args.out.join(TABLE_CSV), csv.as_bytes())?;
    write_atomic(&args.out.join(TABLE_TXT), txt.as_bytes())?;
    print!("{txt}");
    let failed = results
        .iter()
        .filter(|r| r.status == dfkit::sweep::CellStatus::Failed)
        .count();
    if failed > 0 {
        eprintln!(
            "{failed} cell(s) failed; see {}",
            args.out.join("sweep_results.json").display()
        );
    }
    Ok(())
}

fn load_split_records(
    manifest: &Path,
    root: &Path,
    splits: Option<&Path>,
    split: Split,
) -> Result<Vec<(String, PathBuf, Label)>> {
    let loaded = dfkit::data::load_manifest(manifest, root)?;
    let loaded = match splits {
        Some(path) => SplitAssignments::load(path)?.apply(&loaded)?,
        None => loaded,
    };
    let records: Vec<(String, PathBuf, Label)> = loaded
        .records_in(split)
        .map(|r| (r.id.clone(), r.path.clone(), r.label))
        .collect();
    if records.is_empty() {
        return Err(Error::EmptySplit(match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }));
    }
    Ok(records)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidConfig(format!(
            "unknown split {s:?} (train, val, test)"
        ))),
    }
}

fn detector_preprocess(detector: &Detector, eval_side: u32) -> PreprocessConfig {
    let mut pp = PreprocessConfig::with_normalization(detector.normalization());
    pp.eval_side = eval_side;
    pp
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let root = default_root(&args.manifest, args.root.clone());
    let (detector, _) = load_detector(&args.checkpoint)?;
    let pp = detector_preprocess(&detector, args.eval_side);
    let records = load_split_records(&args.manifest, &root, args.splits.as_deref(), split)?;

    #[derive(serde::Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        manifest: &'a Path,
        split: &'a str,
        threshold: f64,
        eval_side: u32,
        detector: DetectorConfig,
    }
    echo_config(
        &args.out,
        &Resolved {
            checkpoint: &args.checkpoint,
            manifest: &args.manifest,
            split: &args.split,
            threshold: args.threshold,
            eval_side: args.eval_side,
            detector: detector.config,
        },
    )?;

    let cache_root = env_cache_root(args.cache_root);
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(args.batch_size.max(1)) {
        let mut tensors = Vec::with_capacity(chunk.len());
        for (id, path, _) in chunk {
            let img = open_for_training(cache_root.as_deref(), id, path)?;
            tensors.push(eval_transform(&img, &pp)?);
        }
        let batch = candle_core::Tensor::stack(&tensors, 0)?;
        let scores = detector.predict_scores(&batch)?;
        for ((id, _, label), score) in chunk.iter().zip(scores) {
            preds.push(ScoredPrediction::new(id.clone(), score as f64, *label));
        }
    }

    write_predictions(&args.out.join("predictions.csv"), &preds)?;
    let report = evaluate(&preds, args.threshold)?;
    write_report(&args.out, &report)?;
    println!(
        "{} images: accuracy {:.4}{}{}",
        preds.len(),
        report.accuracy,
        report
            .roc_auc
            .map(|a| format!(", roc auc {a:.4}"))
            .unwrap_or_default(),
        report
            .average_precision
            .map(|a| format!(", average precision {a:.4}"))
            .unwrap_or_default(),
    );
    if args.bootstrap > 0 {
        let mut intervals = BTreeMap::new();
        for (name, metric) in [
            ("accuracy", BootstrapMetric::Accuracy),
            ("roc_auc", BootstrapMetric::RocAuc),
            ("average_precision", BootstrapMetric::AveragePrecision),
        ] {
            let ci = bootstrap_ci(
                &preds,
                metric,
                args.bootstrap,
                args.bootstrap_seed,
                args.threshold,
            )?;
            println!("{name} 95% CI: [{:.4}, {:.4}]", ci.0, ci.1);
            intervals.insert(name.to_string(), ci);
        }
        let json = serde_json::to_string_pretty(&intervals)
            .map_err(|e| Error::InvalidConfig(format!("serialize intervals: {e}")))?;
        write_atomic(&args.out.join("bootstrap.json"), json.as_bytes())?;
    }
    Ok(())
}

fn cmd_gradcam(args: GradcamArgs) -> Result<()> {
    let root = default_root(&args.manifest, args.root.clone());
    let (detector, _) = load_detector(&args.checkpoint)?;
    let pp = detector_preprocess(&detector, args.eval_side);
    let colormap = Colormap::parse(&args.colormap)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown colormap {:?}", args.colormap)))?;
    let manifest = dfkit::data::load_manifest(&args.manifest, &root)?;

    #[derive(serde::Serialize)]
    struct Resolved<'a> {
        checkpoint: &'a Path,
        class: &'a str,
        colormap: &'a str,
        blend: f32,
        eval_side: u32,
        ids: &'a [String],
    }
    echo_config(
        &args.out,
        &Resolved {
            checkpoint: &args.checkpoint,
            class: &args.class,
            colormap: &args.colormap,
            blend: args.blend,
            eval_side: args.eval_side,
            ids: &args.ids,
        },
    )?;

    let cache_root = env_cache_root(args.cache_root);
    let model_tag = detector.config.arch.name();
    for id in &args.ids {
        let record = manifest
            .records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("id {id:?} not in manifest")))?;
        let img = open_for_training(cache_root.as_deref(), id, &record.path)?;
        let view = eval_view(&img, &pp)?;
        let tensor = eval_transform(&img, &pp)?;
        let target = match args.class.as_str() {
            "fake" => Label::Fake,
            "real" => Label::Real,
            "predicted" => {
                let batch = tensor.unsqueeze(0)?;
                let score = detector.predict_scores(&batch)?[0];
                if score >= 0.5 {
                    Label::Fake
                } else {
                    Label::Real
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown class {other:?} (fake, real, predicted)"
                )))
            }
        };
        let map = gradcam(&detector, &tensor, target)?;
        if map.zero_flagged {
            eprintln!("note: {id}: gradients were all zero; heatmap is empty");
        }
        let safe_id = id.replace(['/', '\\'], "_");
        let png = args.out.join(format!("{safe_id}.{model_tag}.{target}.png"));
        let blended = overlay(&view, &map, colormap, args.blend)?;
        blended.save(&png).map_err(|e| Error::ImageDecode {
            path: png.clone(),
            source: e,
        })?;
        let npy = args.out.join(format!("{safe_id}.{model_tag}.heatmap.npy"));
        write_heatmap_npy(&npy, &map)?;
        println!("{id}: wrote {} and {}", png.display(), npy.display());
    }
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let detector = match (&args.checkpoint, &args.arch) {
        (Some(path), _) => load_detector(path)?.0,
        (None, Some(arch)) => {
            let config = DetectorConfig {
                arch: parse_arch(arch)?,
                init: parse_init(&args.init)?,
                freeze_backbone: false,
                dropout_rate: 0.2,
            };
            build_detector(&config)?
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "profile needs --checkpoint or --arch".into(),
            ))
        }
    };

    #[derive(serde::Serialize)]
    struct Resolved {
        detector: DetectorConfig,
        input_side: usize,
        runs: usize,
        warmup: usize,
    }
    echo_config(
        &args.out,
        &Resolved {
            detector: detector.config,
            input_side: args.input_side,
            runs: args.runs,
            warmup: args.warmup,
        },
    )?;

    let report: ProfileReport =
        profile_detector(&detector, args.input_side, args.runs, args.warmup)?;
    write_profile(&args.out.join("profile.json"), &report)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!("convention: {}", report.flops_convention);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let markdown = render_report(&args.dir)?;
    let out = args.out.unwrap_or_else(|| args.dir.join("report.md"));
    write_atomic(&out, markdown.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}
