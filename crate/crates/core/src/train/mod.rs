//! The finetuning loop: Adam + cross-entropy over the train split, seeded
//! shuffling and augmentation, per-epoch validation, best-checkpoint
//! bookkeeping, early stopping, and exact resume.
//!
//! Every random stream (shuffle order, crop geometry, dropout masks) is
//! derived from (seed, epoch), so an interrupted run replays bit-identically
//! when resumed: epoch k consumes the same randomness whether or not the
//! process restarted in between.

mod adam;

pub use adam::{Adam, AdamParams};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, DatasetManifest, Label, Split, SplitAssignments};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_detector, save_detector};
use crate::model::{build_detector, Detector, DetectorConfig, ForwardMode};
use crate::preprocess::{eval_transform, open_for_training, train_transform, PreprocessConfig};
use crate::schedule::{
    early_stop_update, lr_at, CosineWarmRestartSchedule, EarlyStopState, Schedule,
    StepDecaySchedule, StopMode,
};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const CURVE_FILE: &str = "curve.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const META_FILE: &str = "meta.json";
pub const RESULT_FILE: &str = "result.json";

/// Scheduler shape without the rate itself; combined with `lr0` it builds
/// the concrete schedule, so the two can never disagree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerSpec {
    Step { factor: f64, period: usize },
    Cosine { eta_min_ratio: f64, t0: f64, t_mult: f64 },
}

impl SchedulerSpec {
    pub fn step() -> Self {
        SchedulerSpec::Step {
            factor: 0.5,
            period: 2,
        }
    }

    pub fn cosine() -> Self {
        SchedulerSpec::Cosine {
            eta_min_ratio: 0.01,
            t0: 2.0,
            t_mult: 2.0,
        }
    }

    pub fn build(&self, lr0: f64) -> Schedule {
        match *self {
            SchedulerSpec::Step { factor, period } => Schedule::StepDecay(StepDecaySchedule {
                lr0,
                factor,
                period,
            }),
            SchedulerSpec::Cosine {
                eta_min_ratio,
                t0,
                t_mult,
            } => Schedule::CosineWarmRestart(CosineWarmRestartSchedule {
                lr0,
                eta_min: lr0 * eta_min_ratio,
                t0,
                t_mult,
            }),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SchedulerSpec::Step { .. } => "step",
            SchedulerSpec::Cosine { .. } => "cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub scheduler: SchedulerSpec,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            scheduler: SchedulerSpec::cosine(),
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience must be in 1..=max_epochs, got {}",
                self.patience
            )));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> Schedule {
        self.scheduler.build(self.lr0)
    }
}

/// Where the dataset comes from, stored in the run snapshot so `resume` can
/// reload the identical manifest and split assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub manifest_file: PathBuf,
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits_file: Option<PathBuf>,
}

impl DataSpec {
    pub fn load(&self) -> Result<DatasetManifest> {
        let manifest = crate::data::load_manifest(&self.manifest_file, &self.root)?;
        match &self.splits_file {
            Some(path) => SplitAssignments::load(path)?.apply(&manifest),
            None => Ok(manifest),
        }
    }
}

/// Everything one training run needs; serialized as `config.snapshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub data: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_root: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        let m = self.detector.arch.input_multiple();
        if self.preprocess.train_side as usize % m != 0
            || self.preprocess.eval_side as usize % m != 0
        {
            return Err(Error::InvalidConfig(format!(
                "train/eval sides must be multiples of {m} for {}",
                self.detector.arch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_checkpoint: PathBuf,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BestInfo {
    epoch: usize,
    accuracy: f64,
    loss: f64,
}

/// Trainer bookkeeping persisted inside `last.ckpt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    next_epoch: usize,
    early: EarlyStopState,
    best: Option<BestInfo>,
    adam_step: usize,
    wall_time_so_far: f64,
    curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    seed: u64,
    hardware: String,
    git_hash: String,
    started_unix: u64,
    wall_time_secs: f64,
}

fn mix(seed: u64, tag: u64, extra: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(extra.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn git_hash() -> String {
    if let Ok(h) = std::env::var("DFKIT_GIT_HASH") {
        return h;
    }
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_curve(run_dir: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr
        ));
    }
    write_atomic(&run_dir.join(CURVE_FILE), out.as_bytes())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serialize {}: {e}", path.display())))?;
    write_atomic(path, json.as_bytes())
}

/// Per-image tensors for one split, decoded and transformed in parallel but
/// returned in input order.
fn load_batch_tensors(
    records: &[(&str, &Path, Label)],
    cache_root: Option<&Path>,
    pp: &PreprocessConfig,
    crop_seeds: Option<&[u64]>,
) -> Result<(Tensor, Tensor)> {
    let tensors: Result<Vec<(Tensor, u32)>> = records
        .par_iter()
        .enumerate()
        .map(|(i, (id, path, label))| {
            let img = open_for_training(cache_root, id, path)?;
            let tensor = match crop_seeds {
                Some(seeds) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                    train_transform(&img, &mut rng, pp)?
                }
                None => eval_transform(&img, pp)?,
            };
            Ok((tensor, label.class_index() as u32))
        })
        .collect();
    let pairs = tensors?;
    let views: Vec<Tensor> = pairs.iter().map(|(t, _)| t.clone()).collect();
    let labels: Vec<u32> = pairs.iter().map(|(_, l)| *l).collect();
    let batch = Tensor::stack(&views, 0)?;
    let targets = Tensor::from_vec(labels, pairs.len(), &Device::Cpu)?;
    Ok((batch, targets))
}

struct SplitView<'a> {
    records: Vec<(&'a str, &'a Path, Label)>,
}

impl<'a> SplitView<'a> {
    fn new(manifest: &'a DatasetManifest, split: Split) -> Self {
        let mut records: Vec<(&str, &Path, Label)> = manifest
            .records_in(split)
            .map(|r| (r.id.as_str(), r.path.as_path(), r.label))
            .collect();
        records.sort_by_key(|(id, _, _)| *id);
        Self { records }
    }
}

/// Mean cross-entropy and accuracy of the detector over eval-transformed
/// records.
fn evaluate_split(
    detector: &Detector,
    view: &SplitView,
    cache_root: Option<&Path>,
    pp: &PreprocessConfig,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let n = view.records.len();
    for chunk in view.records.chunks(batch_size) {
        let (batch, targets) = load_batch_tensors(chunk, cache_root, pp, None)?;
        let logits = detector.forward(&batch, ForwardMode::Eval)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &targets)?
            .to_scalar::<f32>()? as f64;
        loss_sum += loss * chunk.len() as f64;
        let scores = crate::model::scores_from_logits(&logits)?;
        for (score, (_, _, label)) in scores.iter().zip(chunk) {
            let predicted = if *score >= 0.5 { Label::Fake } else { Label::Real };
            if predicted == *label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Run (or continue) training in `spec.run_dir`. Completed runs return the
/// stored result untouched; a partially-trained directory is resumed with
/// identical random streams; a config that differs from the stored snapshot
/// is rejected.
pub fn train(spec: &RunSpec) -> Result<TrainResult> {
    train_epochs(spec, None)?.ok_or_else(|| Error::CorruptSnapshot {
        dir: spec.run_dir.clone(),
        reason: "training loop ended without a result".into(),
    })
}

/// Like [`train`], but stop after at most `stop_after` additional epochs,
/// leaving the run directory ready for [`resume`]. Returns None when the
/// budget ran out before the schedule finished.
pub fn train_epochs(spec: &RunSpec, stop_after: Option<usize>) -> Result<Option<TrainResult>> {
    spec.validate()?;
    let run_dir = &spec.run_dir;
    std::fs::create_dir_all(run_dir)
        .map_err(|e| Error::io(format!("create {}", run_dir.display()), e))?;

    // config snapshot: first writer wins, later calls must match
    let snapshot_path = run_dir.join(SNAPSHOT_FILE);
    let serialized = toml::to_string_pretty(spec)
        .map_err(|e| Error::InvalidConfig(format!("serialize run spec: {e}")))?;
    if snapshot_path.exists() {
        let stored = std::fs::read_to_string(&snapshot_path)
            .map_err(|e| Error::io(format!("read {}", snapshot_path.display()), e))?;
        if stored != serialized {
            let detail = stored
                .lines()
                .zip(serialized.lines())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("stored `{a}` vs requested `{b}`"))
                .unwrap_or_else(|| "snapshot length differs".into());
            return Err(Error::ConfigMismatch(detail));
        }
    } else {
        write_atomic(&snapshot_path, serialized.as_bytes())?;
    }

    // completed run: no-op
    let result_path = run_dir.join(RESULT_FILE);
    if result_path.exists() {
        return load_json(&result_path).map(Some);
    }

    let manifest = spec.data.load()?;
    if manifest.split_count(Split::Train) == 0 {
        return Err(Error::EmptySplit("train"));
    }
    if manifest.split_count(Split::Val) == 0 {
        return Err(Error::EmptySplit("val"));
    }

    let train_view = SplitView::new(&manifest, Split::Train);
    let val_view = SplitView::new(&manifest, Split::Val);
    let cache_root = spec.cache_root.as_deref();

    // detector + optimizer, fresh or restored from last.ckpt
    let last_path = run_dir.join(LAST_CKPT);
    let (detector, mut state, restore_optim): (
        Detector,
        TrainerState,
        Option<(BTreeMap<String, Tensor>, usize)>,
    ) = if last_path.exists() {
        let (detector, archive) = load_detector(&last_path)?;
        if archive.meta.config != spec.detector {
            return Err(Error::ConfigMismatch(
                "checkpoint detector config differs from run spec".into(),
            ));
        }
        let state_json = archive
            .extra_meta
            .get("trainer")
            .ok_or_else(|| Error::CorruptSnapshot {
                dir: run_dir.clone(),
                reason: "last.ckpt missing trainer state".into(),
            })?;
        let state: TrainerState =
            serde_json::from_str(state_json).map_err(|e| Error::CorruptSnapshot {
                dir: run_dir.clone(),
                reason: format!("bad trainer state: {e}"),
            })?;
        let optim: BTreeMap<String, Tensor> = archive
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with("optim."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let adam_step = state.adam_step;
        (detector, state, Some((optim, adam_step)))
    } else {
        let detector = build_detector(&spec.detector)?;
        let state = TrainerState {
            next_epoch: 0,
            early: EarlyStopState::new(spec.train.patience),
            best: None,
            adam_step: 0,
            wall_time_so_far: 0.0,
            curve: Vec::new(),
        };
        save_json(
            &run_dir.join(META_FILE),
            &RunMeta {
                seed: spec.train.seed,
                hardware: crate::profile::hardware_descriptor(),
                git_hash: git_hash(),
                started_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                wall_time_secs: 0.0,
            },
        )?;
        (detector, state, None)
    };

    let mut optimizer = Adam::new(
        detector.trainable_params(),
        AdamParams::new(spec.train.lr0, spec.train.weight_decay),
    )?;
    if let Some((tensors, step)) = restore_optim {
        optimizer.restore_state(&tensors, step)?;
    }

    let schedule = spec.train.schedule();
    let seed = spec.train.seed;
    let started = Instant::now();
    let mut stopped_early = false;
    let first_epoch = state.next_epoch;
    let mut out_of_budget = false;

    for epoch in first_epoch..spec.train.max_epochs {
        let lr = lr_at(&schedule, epoch as f64);
        optimizer.set_lr(lr);

        // seeded shuffle of the train split
        let mut order: Vec<usize> = (0..train_view.records.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(seed, 3, epoch as u64));

        let mut train_loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(spec.train.batch_size).enumerate() {
            let records: Vec<(&str, &Path, Label)> =
                chunk.iter().map(|i| train_view.records[*i]).collect();
            let crop_seeds: Vec<u64> = chunk
                .iter()
                .map(|i| mix(mix(seed, 2, epoch as u64), 0, *i as u64))
                .collect();
            let (batch, targets) =
                load_batch_tensors(&records, cache_root, &spec.preprocess, Some(&crop_seeds))?;
            let logits = detector.forward(
                &batch,
                ForwardMode::Train {
                    dropout_rng: &mut dropout_rng,
                },
            )?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            let loss_val = loss.to_scalar::<f32>()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                    lr,
                });
            }
            let grads = loss.backward()?;
            optimizer.step(&grads)?;
            train_loss_sum += loss_val * records.len() as f64;
        }
        let train_loss = train_loss_sum / train_view.records.len() as f64;

        let (val_loss, val_accuracy) = evaluate_split(
            &detector,
            &val_view,
            cache_root,
            &spec.preprocess,
            spec.train.batch_size,
        )?;

        state.curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            lr,
        });

        // best checkpoint: higher accuracy wins, ties broken by lower loss
        let improved = match &state.best {
            None => true,
            Some(best) => {
                val_accuracy > best.accuracy
                    || (val_accuracy == best.accuracy && val_loss < best.loss)
            }
        };
        if improved {
            state.best = Some(BestInfo {
                epoch,
                accuracy: val_accuracy,
                loss: val_loss,
            });
            save_detector(
                &run_dir.join(BEST_CKPT),
                &detector,
                Some(epoch),
                Some(val_accuracy),
                &BTreeMap::new(),
                &BTreeMap::new(),
            )?;
        }

        let (early, stop) = early_stop_update(state.early.clone(), epoch, val_accuracy, StopMode::Maximize)?;
        state.early = early;

        state.next_epoch = epoch + 1;
        state.adam_step = optimizer.step_count();
        let trainer_json = serde_json::to_string(&TrainerState {
            wall_time_so_far: state.wall_time_so_far + started.elapsed().as_secs_f64(),
            ..state.clone()
        })
        .map_err(|e| Error::InvalidConfig(format!("trainer state: {e}")))?;
        let mut extra_meta = BTreeMap::new();
        extra_meta.insert("trainer".to_string(), trainer_json);
        save_detector(
            &last_path,
            &detector,
            Some(epoch),
            Some(val_accuracy),
            &optimizer.state_tensors(),
            &extra_meta,
        )?;
        write_curve(run_dir, &state.curve)?;

        if stop {
            stopped_early = true;
            break;
        }
        if let Some(budget) = stop_after {
            if epoch + 1 - first_epoch >= budget && epoch + 1 < spec.train.max_epochs {
                out_of_budget = true;
                break;
            }
        }
    }

    if out_of_budget {
        return Ok(None);
    }

    let wall_time_secs = state.wall_time_so_far + started.elapsed().as_secs_f64();
    let best = state.best.clone().ok_or_else(|| Error::CorruptSnapshot {
        dir: run_dir.clone(),
        reason: "training finished without a best epoch".into(),
    })?;
    let result = TrainResult {
        curve: state.curve.clone(),
        best_epoch: best.epoch,
        best_val_accuracy: best.accuracy,
        best_checkpoint: run_dir.join(BEST_CKPT),
        stopped_early,
        wall_time_secs,
    };
    save_json(&result_path, &result)?;
    if let Ok(mut meta) = load_json::<RunMeta>(&run_dir.join(META_FILE)) {
        meta.wall_time_secs = wall_time_secs;
        save_json(&run_dir.join(META_FILE), &meta)?;
    }
    Ok(Some(result))
}

/// Continue a run from its own snapshot. Completed runs are a no-op.
pub fn resume(run_dir: &Path) -> Result<TrainResult> {
    let snapshot_path = run_dir.join(SNAPSHOT_FILE);
    if !snapshot_path.exists() {
        return Err(Error::CorruptSnapshot {
            dir: run_dir.to_path_buf(),
            reason: format!("missing {SNAPSHOT_FILE}"),
        });
    }
    let text = std::fs::read_to_string(&snapshot_path)
        .map_err(|e| Error::io(format!("read {}", snapshot_path.display()), e))?;
    let spec: RunSpec = toml::from_str(&text).map_err(|e| Error::Parse {
        path: snapshot_path,
        reason: e.to_string(),
    })?;
    train(&spec)
}
