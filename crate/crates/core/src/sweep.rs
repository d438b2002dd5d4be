//! Hyperparameter grid orchestration: run every (architecture, init,
//! scheduler, learning rate) cell against the same persisted validation
//! split, aggregate best validation accuracies, and render the results as a
//! machine-readable CSV plus an aligned text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, derive_validation_split, SplitAssignments, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Architecture, DetectorConfig, InitMode};
use crate::preprocess::{NormalizationStats, PreprocessConfig};
use crate::profile::reference_profile;
use crate::train::{train, DataSpec, RunSpec, SchedulerSpec, TrainConfig};

pub const SPLITS_FILE: &str = "splits.json";
pub const RESULTS_FILE: &str = "sweep_results.json";
pub const TABLE_CSV: &str = "table1.csv";
pub const TABLE_TXT: &str = "table1.txt";

/// Scheduler axis entry; expands to a full [`SchedulerSpec`] with defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Cosine,
    Step,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::Step => "step",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(SchedulerKind::Cosine),
            "step" => Some(SchedulerKind::Step),
            _ => None,
        }
    }

    pub fn spec(self) -> SchedulerSpec {
        match self {
            SchedulerKind::Cosine => SchedulerSpec::cosine(),
            SchedulerKind::Step => SchedulerSpec::step(),
        }
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared settings applied to every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepShared {
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub freeze_backbone: bool,
    pub dropout_rate: f64,
    pub cache_short_side: u32,
    pub train_side: u32,
    pub eval_side: u32,
    /// Runs per cell; above one, cells report mean and standard deviation
    /// over seeds (base seed, base seed + 1, ...).
    #[serde(default = "default_seeds")]
    pub seeds_per_cell: usize,
}

fn default_seeds() -> usize {
    1
}

impl Default for SweepShared {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            freeze_backbone: false,
            dropout_rate: 0.2,
            cache_short_side: 384,
            train_side: 256,
            eval_side: 256,
            seeds_per_cell: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub archs: Vec<Architecture>,
    pub inits: Vec<InitMode>,
    pub schedulers: Vec<SchedulerKind>,
    pub lrs: Vec<f64>,
    pub shared: SweepShared,
    pub data: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_root: Option<PathBuf>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(Error::EmptyAxis("archs"));
        }
        if self.inits.is_empty() {
            return Err(Error::EmptyAxis("inits"));
        }
        if self.schedulers.is_empty() {
            return Err(Error::EmptyAxis("schedulers"));
        }
        if self.lrs.is_empty() {
            return Err(Error::EmptyAxis("lrs"));
        }
        if self.lrs.iter().any(|lr| !(lr > &0.0)) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.archs.len() * self.inits.len() * self.schedulers.len() * self.lrs.len()
    }

    /// Cells in deterministic order: arch, then init, then scheduler, then lr.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::with_capacity(self.cell_count());
        for &arch in &self.archs {
            for &init in &self.inits {
                for &scheduler in &self.schedulers {
                    for &lr in &self.lrs {
                        out.push(CellKey {
                            arch,
                            init,
                            scheduler,
                            lr,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub arch: Architecture,
    pub init: InitMode,
    pub scheduler: SchedulerKind,
    pub lr: f64,
}

pub fn format_lr(lr: f64) -> String {
    format!("{lr:e}")
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.arch.name(),
            self.init.name(),
            self.scheduler.name(),
            format_lr(self.lr)
        )
    }

    /// Tie-break ordering: fewer reference GFLOPs first, then the
    /// (arch, scheduler, lr, init) tuple lexicographically.
    fn tie_key(&self) -> (u64, &'static str, &'static str, u64, &'static str) {
        let gflops = (reference_profile(self.arch).1 * 100.0) as u64;
        (
            gflops,
            self.arch.name(),
            self.scheduler.name(),
            (self.lr * 1e12) as u64,
            self.init.name(),
        )
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.arch.name(),
            self.init.name(),
            self.scheduler.name(),
            format_lr(self.lr)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Done,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCellResult {
    pub key: CellKey,
    /// Mean best validation accuracy over the cell's seeds.
    pub best_val_accuracy: Option<f64>,
    /// Standard deviation over seeds; present only for multi-seed cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_std: Option<f64>,
    pub best_epoch: Option<usize>,
    pub run_dir: PathBuf,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// True when resume found the cell already completed on disk.
    #[serde(default)]
    pub reused: bool,
}

/// Train every grid cell sequentially against the shared validation split.
/// Per-cell failures are recorded, not fatal; an existing completed cell is
/// reused when `resume` is set.
pub fn run_sweep(grid: &SweepGrid, sweep_dir: &Path, resume: bool) -> Result<Vec<SweepCellResult>> {
    grid.validate()?;
    std::fs::create_dir_all(sweep_dir)
        .map_err(|e| Error::io(format!("create {}", sweep_dir.display()), e))?;

    // one validation split for every cell, persisted alongside the results
    let splits_path = sweep_dir.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        SplitAssignments::load(&splits_path)?
    } else {
        let manifest = load_manifest(&grid.data.manifest_file, &grid.data.root)?;
        let derived = derive_validation_split(&manifest, &grid.shared.split)?;
        let splits = SplitAssignments::from_manifest(&derived, &grid.shared.split);
        splits.save(&splits_path)?;
        splits
    };
    let expected_hash = splits.val_ids_hash();

    let seeds = grid.shared.seeds_per_cell.max(1);
    let mut results = Vec::new();
    for key in grid.cells() {
        let cell_dir = sweep_dir.join("cells").join(key.dir_name());

        // shared-split integrity: every cell must see the same val id-set
        let cell_hash = SplitAssignments::load(&splits_path)?.val_ids_hash();
        if cell_hash != expected_hash {
            return Err(Error::SplitHashMismatch(splits_path.display().to_string()));
        }

        let mut accuracies = Vec::with_capacity(seeds);
        let mut best_epoch = None;
        let mut best_seed_acc = f64::NEG_INFINITY;
        let mut reused_all = true;
        let mut failure = None;
        for offset in 0..seeds {
            let run_dir = if seeds == 1 {
                cell_dir.clone()
            } else {
                cell_dir.join(format!("seed{offset}"))
            };
            let mut spec = cell_run_spec(grid, &key, &run_dir, &splits_path);
            spec.train.seed = grid.shared.train.seed + offset as u64;
            let completed = run_dir.join(crate::train::RESULT_FILE).exists();
            match train(&spec) {
                Ok(r) => {
                    // report the best epoch of the best-performing seed
                    if r.best_val_accuracy > best_seed_acc {
                        best_seed_acc = r.best_val_accuracy;
                        best_epoch = Some(r.best_epoch);
                    }
                    accuracies.push(r.best_val_accuracy);
                    reused_all &= resume && completed;
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }

        let result = match failure {
            None => {
                let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
                let accuracy_std = (accuracies.len() > 1).then(|| {
                    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
                        / (accuracies.len() - 1) as f64;
                    var.sqrt()
                });
                SweepCellResult {
                    key,
                    best_val_accuracy: Some(mean),
                    accuracy_std,
                    best_epoch,
                    run_dir: cell_dir.clone(),
                    status: CellStatus::Done,
                    message: None,
                    reused: reused_all,
                }
            }
            Some(message) => SweepCellResult {
                key,
                best_val_accuracy: None,
                accuracy_std: None,
                best_epoch: None,
                run_dir: cell_dir.clone(),
                status: CellStatus::Failed,
                message: Some(message),
                reused: false,
            },
        };
        results.push(result);
        save_results(sweep_dir, &results)?;
    }
    Ok(results)
}

fn cell_run_spec(grid: &SweepGrid, key: &CellKey, run_dir: &Path, splits_path: &Path) -> RunSpec {
    let normalization = match key.init {
        InitMode::Clip => NormalizationStats::clip(),
        _ => NormalizationStats::imagenet(),
    };
    let mut preprocess = PreprocessConfig::with_normalization(normalization);
    preprocess.cache_short_side = grid.shared.cache_short_side;
    preprocess.train_side = grid.shared.train_side;
    preprocess.eval_side = grid.shared.eval_side;

    RunSpec {
        detector: DetectorConfig {
            arch: key.arch,
            init: key.init,
            freeze_backbone: grid.shared.freeze_backbone,
            dropout_rate: grid.shared.dropout_rate,
        },
        train: TrainConfig {
            lr0: key.lr,
            scheduler: key.scheduler.spec(),
            ..grid.shared.train.clone()
        },
        preprocess,
        data: DataSpec {
            manifest_file: grid.data.manifest_file.clone(),
            root: grid.data.root.clone(),
            splits_file: Some(splits_path.to_path_buf()),
        },
        cache_root: grid.cache_root.clone(),
        run_dir: run_dir.to_path_buf(),
    }
}

pub fn save_results(sweep_dir: &Path, results: &[SweepCellResult]) -> Result<()> {
    let json = serde_json::to_string_pretty(results)
        .map_err(|e| Error::InvalidConfig(format!("serialize results: {e}")))?;
    crate::data::write_atomic(&sweep_dir.join(RESULTS_FILE), json.as_bytes())
}

pub fn load_results(sweep_dir: &Path) -> Result<Vec<SweepCellResult>> {
    let path = sweep_dir.join(RESULTS_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        reason: e.to_string(),
    })
}

/// Render results as (csv, aligned text). Rows are scheduler x lr, columns
/// arch x init; missing cells show an em dash. Output depends only on the
/// result set, so re-rendering from disk is byte-identical.
pub fn emit_table(results: &[SweepCellResult]) -> Result<(String, String)> {
    if results.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let mut by_key: BTreeMap<String, &SweepCellResult> = BTreeMap::new();
    let mut schedulers: Vec<SchedulerKind> = Vec::new();
    let mut lrs: Vec<f64> = Vec::new();
    let mut columns: Vec<(Architecture, InitMode)> = Vec::new();
    for r in results {
        by_key.insert(r.key.to_string(), r);
        if !schedulers.contains(&r.key.scheduler) {
            schedulers.push(r.key.scheduler);
        }
        if !lrs.iter().any(|lr| lr == &r.key.lr) {
            lrs.push(r.key.lr);
        }
        if !columns.contains(&(r.key.arch, r.key.init)) {
            columns.push((r.key.arch, r.key.init));
        }
    }
    schedulers.sort();
    lrs.sort_by(|a, b| b.partial_cmp(a).expect("positive lrs"));
    columns.sort_by_key(|(a, i)| (*a, *i));

    let mut csv = String::from("scheduler,lr");
    for (arch, init) in &columns {
        let _ = write!(csv, ",{}_{}", arch.name(), init.name());
    }
    csv.push('\n');

    let mut txt = String::new();
    let _ = write!(txt, "{:<10} {:>8}", "scheduler", "lr");
    for (arch, init) in &columns {
        let _ = write!(txt, " {:>22}", format!("{}/{}", arch.name(), init.name()));
    }
    txt.push('\n');

    for scheduler in &schedulers {
        for lr in &lrs {
            let _ = write!(csv, "{},{}", scheduler.name(), format_lr(*lr));
            let _ = write!(txt, "{:<10} {:>8}", scheduler.name(), format_lr(*lr));
            for (arch, init) in &columns {
                let key = CellKey {
                    arch: *arch,
                    init: *init,
                    scheduler: *scheduler,
                    lr: *lr,
                };
                let cell = by_key.get(&key.to_string());
                let rendered = match cell {
                    Some(c) if c.status == CellStatus::Done => {
                        match (c.best_val_accuracy, c.accuracy_std) {
                            (Some(a), Some(s)) => format!("{a:.3}±{s:.3}"),
                            (Some(a), None) => format!("{a:.3}"),
                            _ => "—".into(),
                        }
                    }
                    _ => "—".into(),
                };
                let _ = write!(csv, ",{rendered}");
                let _ = write!(txt, " {rendered:>22}");
            }
            csv.push('\n');
            txt.push('\n');
        }
    }
    Ok((csv, txt))
}

fn done_cells(results: &[SweepCellResult]) -> Vec<&SweepCellResult> {
    let mut done: Vec<&SweepCellResult> = results
        .iter()
        .filter(|r| r.status == CellStatus::Done && r.best_val_accuracy.is_some())
        .collect();
    done.sort_by(|a, b| {
        let acc_a = a.best_val_accuracy.unwrap();
        let acc_b = b.best_val_accuracy.unwrap();
        acc_b
            .partial_cmp(&acc_a)
            .expect("finite accuracies")
            .then_with(|| a.key.tie_key().cmp(&b.key.tie_key()))
    });
    done
}

/// Top-k completed cells by best validation accuracy (stable tie-break:
/// fewer GFLOPs, then lexicographic cell key).
pub fn select_best(results: &[SweepCellResult], k: usize) -> Result<Vec<SweepCellResult>> {
    let done = done_cells(results);
    if k > done.len() {
        return Err(Error::NotEnoughCells { k, done: done.len() });
    }
    Ok(done.into_iter().take(k).cloned().collect())
}

/// The best completed cell per architecture, ordered by accuracy.
pub fn select_best_per_arch(results: &[SweepCellResult]) -> Vec<SweepCellResult> {
    let mut out: Vec<SweepCellResult> = Vec::new();
    for cell in done_cells(results) {
        if !out.iter().any(|c| c.key.arch == cell.key.arch) {
            out.push(cell.clone());
        }
    }
    out
}
