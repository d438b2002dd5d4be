//! Config-file loading and merging for the CLI.
//!
//! Precedence is defaults < config file < command-line flags. Files are TOML
//! with the same key names as the flags; unknown keys are rejected so typos
//! fail loudly instead of silently training the wrong thing.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use dfkit::error::{Error, Result};
use dfkit::model::{Architecture, DetectorConfig, InitMode};
use dfkit::preprocess::{CropMode, NormalizationStats, PreprocessConfig};
use dfkit::sweep::{SchedulerKind, SweepGrid, SweepShared};
use dfkit::train::{DataSpec, RunSpec, SchedulerSpec, TrainConfig};

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub arch: Option<String>,
    pub init: Option<String>,
    pub freeze_backbone: Option<bool>,
    pub dropout_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub kind: Option<String>,
    pub factor: Option<f64>,
    pub period: Option<usize>,
    pub eta_min_ratio: Option<f64>,
    pub t0: Option<f64>,
    pub t_mult: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: Option<f64>,
    #[serde(default)]
    pub scheduler: Option<SchedulerSection>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub cache_short_side: Option<u32>,
    pub crop_low: Option<f64>,
    pub crop_high: Option<f64>,
    pub crop_mode: Option<String>,
    pub train_side: Option<u32>,
    pub eval_side: Option<u32>,
    /// "imagenet", "clip", or "auto" (follow the init mode).
    pub normalization: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub root: Option<PathBuf>,
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub data: DataSection,
    pub cache_root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }
}

pub fn parse_arch(s: &str) -> Result<Architecture> {
    Architecture::parse(s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown architecture {s:?} (resnet50, vit_b32, convnext_base)")))
}

pub fn parse_init(s: &str) -> Result<InitMode> {
    InitMode::parse(s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown init mode {s:?} (random, imagenet, clip)")))
}

pub fn parse_scheduler_kind(s: &str) -> Result<SchedulerKind> {
    SchedulerKind::parse(s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown scheduler {s:?} (cosine, step)")))
}

fn parse_crop_mode(s: &str) -> Result<CropMode> {
    match s {
        "short_side" => Ok(CropMode::ShortSide),
        "area" => Ok(CropMode::Area),
        _ => Err(Error::InvalidConfig(format!(
            "unknown crop mode {s:?} (short_side, area)"
        ))),
    }
}

/// Normalization choice: explicit stats or follow the init mode.
pub fn resolve_normalization(choice: Option<&str>, init: InitMode) -> Result<NormalizationStats> {
    match choice.unwrap_or("auto") {
        "imagenet" => Ok(NormalizationStats::imagenet()),
        "clip" => Ok(NormalizationStats::clip()),
        "auto" => Ok(match init {
            InitMode::Clip => NormalizationStats::clip(),
            _ => NormalizationStats::imagenet(),
        }),
        other => Err(Error::InvalidConfig(format!(
            "unknown normalization {other:?} (imagenet, clip, auto)"
        ))),
    }
}

/// Flag-level overrides collected by the `train` command; every config-file
/// key has a matching entry here.
#[derive(Debug, Default)]
pub struct TrainOverrides {
    pub arch: Option<String>,
    pub init: Option<String>,
    pub freeze_backbone: Option<bool>,
    pub dropout_rate: Option<f64>,
    pub lr0: Option<f64>,
    pub scheduler: Option<String>,
    pub step_factor: Option<f64>,
    pub step_period: Option<usize>,
    pub eta_min_ratio: Option<f64>,
    pub t0: Option<f64>,
    pub t_mult: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub cache_short_side: Option<u32>,
    pub crop_low: Option<f64>,
    pub crop_high: Option<f64>,
    pub crop_mode: Option<String>,
    pub train_side: Option<u32>,
    pub eval_side: Option<u32>,
    pub normalization: Option<String>,
    pub manifest: Option<PathBuf>,
    pub root: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub cache_root: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

/// Merge defaults, the optional config file, and flag overrides into a full
/// run spec.
pub fn resolve_run_spec(file: Option<TrainFile>, flags: TrainOverrides) -> Result<RunSpec> {
    let file = file.unwrap_or_default();

    let arch_str = flags
        .arch
        .or(file.detector.arch)
        .unwrap_or_else(|| "resnet50".into());
    let init_str = flags
        .init
        .or(file.detector.init)
        .unwrap_or_else(|| "clip".into());
    let arch = parse_arch(&arch_str)?;
    let init = parse_init(&init_str)?;
    let detector = DetectorConfig {
        arch,
        init,
        freeze_backbone: flags
            .freeze_backbone
            .or(file.detector.freeze_backbone)
            .unwrap_or(false),
        dropout_rate: flags
            .dropout_rate
            .or(file.detector.dropout_rate)
            .unwrap_or(0.2),
    };

    let file_sched = file.train.scheduler.unwrap_or_default();
    let sched_kind = flags
        .scheduler
        .or(file_sched.kind)
        .unwrap_or_else(|| "cosine".into());
    let scheduler = match parse_scheduler_kind(&sched_kind)? {
        SchedulerKind::Step => SchedulerSpec::Step {
            factor: flags.step_factor.or(file_sched.factor).unwrap_or(0.5),
            period: flags.step_period.or(file_sched.period).unwrap_or(2),
        },
        SchedulerKind::Cosine => SchedulerSpec::Cosine {
            eta_min_ratio: flags
                .eta_min_ratio
                .or(file_sched.eta_min_ratio)
                .unwrap_or(0.01),
            t0: flags.t0.or(file_sched.t0).unwrap_or(2.0),
            t_mult: flags.t_mult.or(file_sched.t_mult).unwrap_or(2.0),
        },
    };
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        lr0: flags.lr0.or(file.train.lr0).unwrap_or(1e-4),
        scheduler,
        weight_decay: flags
            .weight_decay
            .or(file.train.weight_decay)
            .unwrap_or(defaults.weight_decay),
        batch_size: flags
            .batch_size
            .or(file.train.batch_size)
            .unwrap_or(defaults.batch_size),
        max_epochs: flags
            .max_epochs
            .or(file.train.max_epochs)
            .unwrap_or(defaults.max_epochs),
        patience: flags
            .patience
            .or(file.train.patience)
            .unwrap_or(defaults.patience),
        seed: flags.seed.or(file.train.seed).unwrap_or(defaults.seed),
    };

    let norm_choice = flags.normalization.or(file.preprocess.normalization);
    let normalization = resolve_normalization(norm_choice.as_deref(), init)?;
    let mut preprocess = PreprocessConfig::with_normalization(normalization);
    if let Some(v) = flags.cache_short_side.or(file.preprocess.cache_short_side) {
        preprocess.cache_short_side = v;
    }
    let low = flags
        .crop_low
        .or(file.preprocess.crop_low)
        .unwrap_or(preprocess.train_crop_fraction_range.0);
    let high = flags
        .crop_high
        .or(file.preprocess.crop_high)
        .unwrap_or(preprocess.train_crop_fraction_range.1);
    preprocess.train_crop_fraction_range = (low, high);
    if let Some(mode) = flags.crop_mode.or(file.preprocess.crop_mode) {
        preprocess.crop_mode = parse_crop_mode(&mode)?;
    }
    if let Some(v) = flags.train_side.or(file.preprocess.train_side) {
        preprocess.train_side = v;
    }
    if let Some(v) = flags.eval_side.or(file.preprocess.eval_side) {
        preprocess.eval_side = v;
    }

    let manifest_file = flags
        .manifest
        .or(file.data.manifest)
        .ok_or_else(|| Error::InvalidConfig("a manifest file is required (--manifest)".into()))?;
    let root = flags
        .root
        .or(file.data.root)
        .unwrap_or_else(|| manifest_file.parent().unwrap_or(Path::new(".")).to_path_buf());
    let data = DataSpec {
        manifest_file,
        root,
        splits_file: flags.splits.or(file.data.splits),
    };

    let run_dir = flags
        .run_dir
        .or(file.run_dir)
        .ok_or_else(|| Error::InvalidConfig("a run directory is required (--run-dir)".into()))?;

    let spec = RunSpec {
        detector,
        train,
        preprocess,
        data,
        cache_root: flags.cache_root.or(file.cache_root),
        run_dir,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// sweep config
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub archs: Option<Vec<String>>,
    pub inits: Option<Vec<String>>,
    pub schedulers: Option<Vec<String>>,
    pub lrs: Option<Vec<f64>>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub data: DataSection,
    pub cache_root: Option<PathBuf>,
    pub val_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub stratified: Option<bool>,
    pub seeds_per_cell: Option<usize>,
}

impl SweepFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }
}

#[derive(Debug, Default)]
pub struct SweepOverrides {
    pub archs: Option<String>,
    pub inits: Option<String>,
    pub schedulers: Option<String>,
    pub lrs: Option<String>,
    pub manifest: Option<PathBuf>,
    pub root: Option<PathBuf>,
    pub cache_root: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seeds_per_cell: Option<usize>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub weight_decay: Option<f64>,
    pub freeze_backbone: Option<bool>,
    pub dropout_rate: Option<f64>,
    pub val_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub no_stratify: bool,
    pub cache_short_side: Option<u32>,
    pub train_side: Option<u32>,
    pub eval_side: Option<u32>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn resolve_sweep_grid(file: SweepFile, flags: SweepOverrides) -> Result<SweepGrid> {
    let archs: Vec<Architecture> = match flags.archs.map(|s| split_list(&s)).or(file.archs) {
        Some(list) => list.iter().map(|s| parse_arch(s)).collect::<Result<_>>()?,
        None => Architecture::ALL.to_vec(),
    };
    let inits: Vec<InitMode> = match flags.inits.map(|s| split_list(&s)).or(file.inits) {
        Some(list) => list.iter().map(|s| parse_init(s)).collect::<Result<_>>()?,
        None => InitMode::ALL.to_vec(),
    };
    let schedulers: Vec<SchedulerKind> =
        match flags.schedulers.map(|s| split_list(&s)).or(file.schedulers) {
            Some(list) => list
                .iter()
                .map(|s| parse_scheduler_kind(s))
                .collect::<Result<_>>()?,
            None => vec![SchedulerKind::Cosine, SchedulerKind::Step],
        };
    let lrs: Vec<f64> = match flags.lrs {
        Some(s) => split_list(&s)
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad learning rate {t:?}")))
            })
            .collect::<Result<_>>()?,
        None => file.lrs.unwrap_or_else(|| vec![1e-3, 1e-4, 1e-5]),
    };

    let defaults = TrainConfig::default();
    let train = TrainConfig {
        lr0: defaults.lr0, // per-cell value comes from the lr axis
        scheduler: SchedulerSpec::cosine(),
        weight_decay: flags
            .weight_decay
            .or(file.train.weight_decay)
            .unwrap_or(defaults.weight_decay),
        batch_size: flags
            .batch_size
            .or(file.train.batch_size)
            .unwrap_or(defaults.batch_size),
        max_epochs: flags
            .max_epochs
            .or(file.train.max_epochs)
            .unwrap_or(defaults.max_epochs),
        patience: flags
            .patience
            .or(file.train.patience)
            .unwrap_or(defaults.patience),
        seed: flags.seed.or(file.train.seed).unwrap_or(defaults.seed),
    };

    let manifest_file = flags
        .manifest
        .or(file.data.manifest)
        .ok_or_else(|| Error::InvalidConfig("a manifest file is required (--manifest)".into()))?;
    let root = flags
        .root
        .or(file.data.root)
        .unwrap_or_else(|| manifest_file.parent().unwrap_or(Path::new(".")).to_path_buf());

    let shared = SweepShared {
        train,
        split: dfkit::data::SplitSpec {
            val_fraction_of_train: flags.val_fraction.or(file.val_fraction).unwrap_or(0.10),
            seed: flags.split_seed.or(file.split_seed).unwrap_or(42),
            stratified: if flags.no_stratify {
                false
            } else {
                file.stratified.unwrap_or(true)
            },
        },
        freeze_backbone: flags
            .freeze_backbone
            .or(file.detector.freeze_backbone)
            .unwrap_or(false),
        dropout_rate: flags
            .dropout_rate
            .or(file.detector.dropout_rate)
            .unwrap_or(0.2),
        cache_short_side: flags
            .cache_short_side
            .or(file.preprocess.cache_short_side)
            .unwrap_or(384),
        train_side: flags.train_side.or(file.preprocess.train_side).unwrap_or(256),
        eval_side: flags.eval_side.or(file.preprocess.eval_side).unwrap_or(256),
        seeds_per_cell: flags
            .seeds_per_cell
            .or(file.seeds_per_cell)
            .unwrap_or(1)
            .max(1),
    };

    let grid = SweepGrid {
        archs,
        inits,
        schedulers,
        lrs,
        shared,
        data: DataSpec {
            manifest_file,
            root,
            splits_file: None,
        },
        cache_root: flags.cache_root.or(file.cache_root),
    };
    grid.validate()?;
    Ok(grid)
}
