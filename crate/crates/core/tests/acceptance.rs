//! Acceptance suite: one PASS/FAIL line per criterion (SKIP for the criteria
//! that need the benchmark dataset, pretrained weights, or trained
//! checkpoints; the required environment variables are named in the line).
//!
//! Criteria run sequentially in their own binary (no test harness) because
//! the latency measurement needs the machine to itself.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfkit::data::{
    derive_validation_split, load_manifest, no_skill_baseline, synthetic_manifest, Label, Split,
    SplitSpec,
};
use dfkit::explain::gradcam;
use dfkit::metrics::{ap_oracle, auc_oracle, evaluate, ScoredPrediction};
use dfkit::model::layers::LayerSpec;
use dfkit::model::{build_detector, Architecture, DetectorConfig, InitMode};
use dfkit::profile::{count_flops, layer_macs, measure_latency, reference_profile, total_macs};
use dfkit::schedule::{
    early_stop_update, lr_at, CosineWarmRestartSchedule, EarlyStopState, Schedule,
    StepDecaySchedule, StopMode,
};

fn pass(criterion: usize, name: &str, detail: String) {
    println!("[PASS] criterion {criterion} ({name}): {detail}");
}

fn skip(criterion: usize, name: &str, reason: String) {
    println!("[SKIP] criterion {criterion} ({name}): {reason}");
}

fn env_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from)
}

fn main() {
    let criteria: Vec<(usize, &str, fn())> = vec![
        (1, "metric oracle equivalence", criterion_01_metric_oracle_equivalence),
        (2, "scheduler closed forms", criterion_02_scheduler_closed_forms),
        (3, "early stopping", criterion_03_early_stopping),
        (4, "split arithmetic", criterion_04_split_arithmetic),
        (5, "activation-map correctness", criterion_05_gradcam_correctness),
        (6, "flop counter", criterion_06_flop_counter),
        (7, "synthetic overfit", criterion_07_synthetic_overfit),
        (8, "parameter counts", criterion_08_parameter_counts),
        (9, "flop estimates", criterion_09_flop_estimates),
        (10, "latency ordering", criterion_10_latency_ordering),
        (11, "best-cell validation accuracies", criterion_11_best_cell_val_accuracies),
        (12, "benchmark test metrics", criterion_12_test_metrics),
        (13, "no-skill baseline", criterion_13_no_skill_baseline),
    ];
    let mut failures = 0usize;
    for (number, name, run) in criteria {
        if let Err(panic) = std::panic::catch_unwind(run) {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            println!("[FAIL] criterion {number} ({name}): {message}");
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. metric oracle equivalence
// ---------------------------------------------------------------------------

fn criterion_01_metric_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_auc_diff = 0f64;
    let mut max_ap_diff = 0f64;
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        // quantized scores force duplicates
        let levels = rng.random_range(2..=12);
        let mut preds: Vec<ScoredPrediction> = (0..n)
            .map(|i| {
                let score = rng.random_range(0..=levels) as f64 / levels as f64;
                let label = if rng.random_bool(0.5) {
                    Label::Fake
                } else {
                    Label::Real
                };
                ScoredPrediction::new(format!("t{trial}i{i}"), score, label)
            })
            .collect();
        preds.push(ScoredPrediction::new(format!("t{trial}f"), 0.5, Label::Fake));
        preds.push(ScoredPrediction::new(format!("t{trial}r"), 0.5, Label::Real));

        let report = evaluate(&preds, 0.5).expect("valid predictions");
        let auc = report.roc_auc.expect("both classes");
        let auc_ref = auc_oracle(&preds).unwrap();
        max_auc_diff = max_auc_diff.max((auc - auc_ref).abs());

        let ap = report.average_precision.expect("both classes");
        let ap_ref = ap_oracle(&preds).unwrap();
        max_ap_diff = max_ap_diff.max((ap - ap_ref).abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(max_auc_diff <= 1e-9, "AUC diverged from oracle: {max_auc_diff}");
    assert!(max_ap_diff <= 1e-12, "AP diverged from oracle: {max_ap_diff}");
    assert!(elapsed < 30.0, "ran too long: {elapsed:.1}s");
    pass(
        1,
        "metric oracle equivalence",
        format!(
            "1000 instances, max |auc-oracle| {max_auc_diff:.2e}, max |ap-oracle| {max_ap_diff:.2e}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. scheduler closed forms
// ---------------------------------------------------------------------------

/// Incremental stepping reference: tracks cycle position epoch by epoch, the
/// way a schedule column would be filled in by hand.
struct CosineStepper {
    lr0: f64,
    eta_min: f64,
    t_in: f64,
    cycle_len: f64,
    t_mult: f64,
}

impl CosineStepper {
    fn lr(&self) -> f64 {
        self.eta_min
            + 0.5 * (self.lr0 - self.eta_min)
                * (1.0 + (std::f64::consts::PI * self.t_in / self.cycle_len).cos())
    }

    fn advance(&mut self) {
        self.t_in += 1.0;
        if self.t_in >= self.cycle_len {
            self.t_in -= self.cycle_len;
            self.cycle_len *= self.t_mult;
        }
    }
}

fn criterion_02_scheduler_closed_forms() {
    // the anchor forced by halving every two epochs
    let anchor = Schedule::StepDecay(StepDecaySchedule::new(1e-3));
    assert_eq!(lr_at(&anchor, 0.0), 1e-3);
    assert!((lr_at(&anchor, 4.0) - 2.5e-4).abs() < 1e-18);

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_diff = 0f64;
    for _ in 0..9 {
        // step decay: closed form vs iterative halving
        let lr0 = 10f64.powf(-rng.random_range(2.0..5.0));
        let factor = rng.random_range(0.3..0.9);
        let period = rng.random_range(1..4usize);
        let schedule = Schedule::StepDecay(StepDecaySchedule { lr0, factor, period });
        let mut current = lr0;
        for epoch in 0..30usize {
            if epoch > 0 && epoch % period == 0 {
                current *= factor;
            }
            let diff = (lr_at(&schedule, epoch as f64) - current).abs();
            max_diff = max_diff.max(diff);
        }

        // cosine warm restarts: closed form vs incremental stepping
        let eta_min = lr0 / rng.random_range(50.0..200.0);
        let t0 = rng.random_range(1..4usize) as f64;
        let t_mult = rng.random_range(1..3usize) as f64;
        let schedule = Schedule::CosineWarmRestart(CosineWarmRestartSchedule {
            lr0,
            eta_min,
            t0,
            t_mult,
        });
        let mut stepper = CosineStepper {
            lr0,
            eta_min,
            t_in: 0.0,
            cycle_len: t0,
            t_mult,
        };
        for epoch in 0..30usize {
            let diff = (lr_at(&schedule, epoch as f64) - stepper.lr()).abs();
            max_diff = max_diff.max(diff);
            stepper.advance();
        }
    }
    assert!(max_diff <= 1e-12, "schedule mismatch: {max_diff:e}");
    pass(
        2,
        "scheduler closed forms",
        format!("9 random configs x 30 epochs, max |closed - stepped| = {max_diff:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 3. early stopping
// ---------------------------------------------------------------------------

fn criterion_03_early_stopping() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..500 {
        let patience = rng.random_range(1..6usize);
        let len = rng.random_range(2..40usize);
        // plateau-heavy traces so stops actually fire
        let mut metrics = Vec::with_capacity(len);
        let mut level: f64 = rng.random_range(0.0..1.0);
        for _ in 0..len {
            if rng.random_bool(0.35) {
                level = rng.random_range(0.0..1.0);
            }
            metrics.push((level * 1000.0).round() / 1000.0);
        }

        // reference: first epoch where consecutive non-improvements hit
        // patience, best = first argmax
        let mut ref_stop = None;
        let mut best = f64::NEG_INFINITY;
        let mut since = 0usize;
        let mut ref_best_epoch = 0usize;
        for (epoch, &m) in metrics.iter().enumerate() {
            if m > best || epoch == 0 {
                best = m;
                ref_best_epoch = epoch;
                since = 0;
            } else {
                since += 1;
                if since >= patience {
                    ref_stop = Some(epoch);
                    break;
                }
            }
        }

        let mut state = EarlyStopState::new(patience);
        let mut got_stop = None;
        for (epoch, &m) in metrics.iter().enumerate() {
            let (next, stop) = early_stop_update(state, epoch, m, StopMode::Maximize).unwrap();
            state = next;
            assert!(
                state.epochs_since_improvement <= patience,
                "trial {trial}: counter exceeded patience"
            );
            if stop {
                got_stop = Some(epoch);
                break;
            }
        }
        assert_eq!(got_stop, ref_stop, "trial {trial}: stop epoch mismatch");
        assert_eq!(
            state.best_epoch,
            Some(ref_best_epoch),
            "trial {trial}: best epoch mismatch"
        );
        // best is never exceeded by any observed metric
        let observed_max = metrics
            [..got_stop.map(|e| e + 1).unwrap_or(metrics.len())]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(state.best_metric, Some(observed_max));
    }
    pass(
        3,
        "early stopping",
        "500 random traces: stop fires exactly at patience, best is argmax".into(),
    );
}

// ---------------------------------------------------------------------------
// 4. split arithmetic
// ---------------------------------------------------------------------------

fn criterion_04_split_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // benchmark-sized manifests always yield 116 val / 1045 train
    for _ in 0..20 {
        let real = rng.random_range(100..1062usize);
        let fake = 1161 - real;
        let manifest = synthetic_manifest(&[
            (Split::Train, Label::Real, real),
            (Split::Train, Label::Fake, fake),
            (Split::Test, Label::Fake, 400),
            (Split::Test, Label::Real, 389),
        ]);
        let spec = SplitSpec {
            seed: rng.random(),
            ..SplitSpec::default()
        };
        let out = derive_validation_split(&manifest, &spec).unwrap();
        assert_eq!(out.split_count(Split::Val), 116);
        assert_eq!(out.split_count(Split::Train), 1045);
        assert_eq!(out.split_count(Split::Test), 789);
    }

    // randomized manifests: partition + stratification invariants
    for trial in 0..200 {
        let real = rng.random_range(5..250usize);
        let fake = rng.random_range(5..250usize);
        let n_train = real + fake;
        let manifest = synthetic_manifest(&[
            (Split::Train, Label::Real, real),
            (Split::Train, Label::Fake, fake),
            (Split::Test, Label::Fake, 10),
        ]);
        let fraction = rng.random_range(0.05..0.5);
        let spec = SplitSpec {
            val_fraction_of_train: fraction,
            seed: rng.random(),
            stratified: true,
        };
        let expected_total = ((fraction * n_train as f64) + 0.5).floor() as usize;
        if expected_total < 2 {
            continue;
        }
        let out = derive_validation_split(&manifest, &spec).unwrap();

        // partition: same ids, each in exactly one split, counts preserved
        let mut before: Vec<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
        let mut after: Vec<&str> = out.records.iter().map(|r| r.id.as_str()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after, "trial {trial}: ids changed");
        assert_eq!(out.split_count(Split::Val), expected_total);
        assert_eq!(out.split_count(Split::Train), n_train - expected_total);
        // class totals preserved across train+val
        assert_eq!(
            out.class_count(Split::Train, Label::Real) + out.class_count(Split::Val, Label::Real),
            real
        );
        // stratification: within one record of the proportional quota
        let quota = expected_total as f64 * real as f64 / n_train as f64;
        let got = out.class_count(Split::Val, Label::Real) as f64;
        assert!(
            (got - quota).abs() <= 1.0 + 1e-9,
            "trial {trial}: real quota {quota:.2}, got {got}"
        );
        assert!(out.counts_consistent());
    }
    pass(
        4,
        "split arithmetic",
        "1161-train manifests give 116/1045; 200 randomized manifests hold the partition and stratification invariants".into(),
    );
}

// ---------------------------------------------------------------------------
// 5. activation-map correctness
// ---------------------------------------------------------------------------

fn criterion_05_gradcam_correctness() {
    // (a) analytic gradients vs central finite differences on a toy
    // fixed-weight model: y = sum_k w_k * mean(A_k), linear in A
    let dev = Device::Cpu;
    let (k, h, w) = (3usize, 5usize, 5usize);
    let weights = [0.8f32, -0.45, 0.2];
    let a_data: Vec<f32> = (0..k * h * w)
        .map(|i| ((i * 29 % 23) as f32) / 11.0 - 1.0)
        .collect();
    let a = Var::from_tensor(&Tensor::from_vec(a_data.clone(), (1, k, h, w), &dev).unwrap())
        .unwrap();
    let wt = Tensor::from_vec(weights.to_vec(), (k,), &dev).unwrap();
    let y = a
        .as_tensor()
        .mean(3)
        .unwrap()
        .mean(2)
        .unwrap()
        .squeeze(0)
        .unwrap()
        .mul(&wt)
        .unwrap()
        .sum_all()
        .unwrap();
    let grads = y.backward().unwrap();
    let grad = grads
        .get(a.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    let eval_y = |data: &[f32]| -> f32 {
        (0..k)
            .map(|ch| {
                weights[ch] * data[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>()
                    / (h * w) as f32
            })
            .sum()
    };
    let eps = 0.125f32;
    let mut max_rel = 0f32;
    for idx in (0..k * h * w).step_by(7) {
        let mut plus = a_data.clone();
        plus[idx] += eps;
        let mut minus = a_data.clone();
        minus[idx] -= eps;
        let fd = (eval_y(&plus) - eval_y(&minus)) / (2.0 * eps);
        let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    assert!(max_rel < 1e-4, "finite differences disagree: rel {max_rel}");

    // (b) zero target weights flag an all-zero map (real detector path)
    let det = build_detector(&DetectorConfig {
        arch: Architecture::VitB32,
        init: InitMode::Random,
        freeze_backbone: true,
        dropout_rate: 0.0,
    })
    .unwrap();
    let d = det.feature_dim();
    for (name, var, _) in det.trainable_params() {
        if name == "head.linear.weight" {
            let real_row = var.as_tensor().narrow(0, 0, 1).unwrap();
            let zero_row = Tensor::zeros((1, d), candle_core::DType::F32, &dev).unwrap();
            var.set(&Tensor::cat(&[&real_row, &zero_row], 0).unwrap()).unwrap();
        } else if name == "head.linear.bias" {
            var.set(&Tensor::zeros(2, candle_core::DType::F32, &dev).unwrap()).unwrap();
        }
    }
    let img = Tensor::randn(0f32, 1f32, (3, 32, 32), &dev).unwrap();
    let map = gradcam(&det, &img, Label::Fake).unwrap();
    assert!(map.zero_flagged);
    assert!(map.grid.iter().all(|v| *v == 0.0));

    // (c) non-negativity over 100 random inputs
    let det = build_detector(&DetectorConfig {
        arch: Architecture::VitB32,
        init: InitMode::Random,
        freeze_backbone: true,
        dropout_rate: 0.0,
    })
    .unwrap();
    let mut min_seen = f32::INFINITY;
    for seed in 0..100u64 {
        let img = {
            let n = 3 * 32 * 32;
            let data: Vec<f32> = (0..n)
                .map(|i| {
                    let x = (i as u64 ^ (seed << 32)).wrapping_mul(0x9e3779b97f4a7c15);
                    ((x >> 34) as f32 / (1u64 << 29) as f32) - 1.0
                })
                .collect();
            Tensor::from_vec(data, (3, 32, 32), &dev).unwrap()
        };
        let class = if seed % 2 == 0 { Label::Fake } else { Label::Real };
        let map = gradcam(&det, &img, class).unwrap();
        for v in map.grid.iter().chain(map.upsampled.iter()) {
            min_seen = min_seen.min(*v);
            assert!(*v >= 0.0, "negative heatmap value {v}");
            assert!(*v <= 1.0 + 1e-6, "unnormalized heatmap value {v}");
        }
    }
    pass(
        5,
        "activation-map correctness",
        format!("finite-diff rel err {max_rel:.1e}; zero-weight case flagged; 100 random maps nonnegative (min {min_seen:.3})"),
    );
}

// ---------------------------------------------------------------------------
// 6. flop counter
// ---------------------------------------------------------------------------

fn criterion_06_flop_counter() {
    // single affine layer: 4 inputs x 2 outputs = 8 MACs
    let affine = LayerSpec::Linear {
        name: "fc".into(),
        in_f: 4,
        out_f: 2,
        tokens: 1,
        bias: true,
    };
    assert_eq!(layer_macs(&affine).unwrap(), 8);

    // 2-layer toy conv net, hand-counted: k^2 * C_in * C_out * H * W
    let toy = |side: usize| {
        vec![
            LayerSpec::Conv {
                name: "conv1".into(),
                in_c: 3,
                out_c: 4,
                kernel: 3,
                groups: 1,
                out_h: side,
                out_w: side,
                bias: true,
            },
            LayerSpec::Conv {
                name: "conv2".into(),
                in_c: 4,
                out_c: 8,
                kernel: 3,
                groups: 1,
                out_h: side,
                out_w: side,
                bias: true,
            },
        ]
    };
    let base = total_macs(&toy(8)).unwrap();
    assert_eq!(base, 9 * 3 * 4 * 64 + 9 * 4 * 8 * 64);
    // doubling the spatial input quadruples conv MACs
    assert_eq!(total_macs(&toy(16)).unwrap(), 4 * base);
    pass(
        6,
        "flop counter",
        format!("toy conv net = {base} MACs (hand count); 2x input -> 4x MACs; affine 4->2 = 8 MACs"),
    );
}

// ---------------------------------------------------------------------------
// 7. synthetic overfit integration
// ---------------------------------------------------------------------------

fn criterion_07_synthetic_overfit() {
    use dfkit::model::checkpoint::load_detector;
    use dfkit::preprocess::{eval_transform, open_image, NormalizationStats, PreprocessConfig};
    use dfkit::train::{train, DataSpec, RunSpec, SchedulerSpec, TrainConfig};

    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("path,label,split\n");
    // 64 separable training images: solid colors vs uniform noise
    for i in 0..32 {
        let name = format!("real{i}.png");
        let c = (i * 7 % 200) as u8;
        image::RgbImage::from_pixel(64, 64, image::Rgb([40 + c, 230 - c, 60 + c / 2]))
            .save(dir.path().join(&name))
            .unwrap();
        csv.push_str(&format!("{name},real,train\n"));
        let name = format!("fake{i}.png");
        image::RgbImage::from_fn(64, 64, |x, y| {
            let mut v = (i as u64)
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((y * 64 + x) as u64);
            v ^= v >> 31;
            v = v.wrapping_mul(0xff51afd7ed558ccd);
            image::Rgb([(v >> 8) as u8, (v >> 20) as u8, (v >> 36) as u8])
        })
        .save(dir.path().join(&name))
        .unwrap();
        csv.push_str(&format!("{name},fake,train\n"));
    }
    // small val carve-out from the same distribution so early stopping has
    // something to watch; test row keeps the manifest well-formed
    for i in 0..4 {
        let name = format!("vreal{i}.png");
        image::RgbImage::from_pixel(64, 64, image::Rgb([10 + 9 * i as u8, 180, 110]))
            .save(dir.path().join(&name))
            .unwrap();
        csv.push_str(&format!("{name},real,train\n"));
        let name = format!("vfake{i}.png");
        image::RgbImage::from_fn(64, 64, |x, y| {
            let v = (x * 151 + y * 31 + i * 7717) as u8;
            image::Rgb([v, v.wrapping_mul(17), v.wrapping_add(53)])
        })
        .save(dir.path().join(&name))
        .unwrap();
        csv.push_str(&format!("{name},fake,train\n"));
    }
    csv.push_str("treal.png,real,test\n");
    image::RgbImage::from_pixel(64, 64, image::Rgb([99, 99, 99]))
        .save(dir.path().join("treal.png"))
        .unwrap();
    let manifest_file = dir.path().join("manifest.csv");
    std::fs::write(&manifest_file, &csv).unwrap();

    let manifest = load_manifest(&manifest_file, dir.path()).unwrap();
    let split_spec = SplitSpec {
        val_fraction_of_train: 8.0 / 72.0,
        seed: 5,
        stratified: true,
    };
    let derived = derive_validation_split(&manifest, &split_spec).unwrap();
    let splits = dfkit::data::SplitAssignments::from_manifest(&derived, &split_spec);
    let splits_file = dir.path().join("splits.json");
    splits.save(&splits_file).unwrap();

    let mut preprocess = PreprocessConfig::with_normalization(NormalizationStats::imagenet());
    preprocess.train_side = 64;
    preprocess.eval_side = 64;
    let spec = RunSpec {
        detector: DetectorConfig {
            arch: Architecture::Resnet50,
            init: InitMode::Random,
            freeze_backbone: true,
            dropout_rate: 0.1,
        },
        train: TrainConfig {
            lr0: 1e-3,
            scheduler: SchedulerSpec::cosine(),
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs: 20,
            patience: 20,
            seed: 9,
            ..Default::default()
        },
        preprocess,
        data: DataSpec {
            manifest_file,
            root: dir.path().to_path_buf(),
            splits_file: Some(splits_file),
        },
        cache_root: None,
        run_dir: dir.path().join("run"),
    };
    let result = train(&spec).unwrap();

    // train accuracy of the best checkpoint over the train split
    let (detector, _) = load_detector(&result.best_checkpoint).unwrap();
    let mut correct = 0usize;
    let mut total = 0usize;
    for record in derived.records_in(Split::Train) {
        let img = open_image(&record.path).unwrap();
        let tensor = eval_transform(&img, &spec.preprocess).unwrap();
        let score = detector.predict_scores(&tensor.unsqueeze(0).unwrap()).unwrap()[0];
        let predicted = if score >= 0.5 { Label::Fake } else { Label::Real };
        if predicted == record.label {
            correct += 1;
        }
        total += 1;
    }
    let train_accuracy = correct as f64 / total as f64;
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        train_accuracy >= 0.95,
        "train accuracy {train_accuracy:.3} after {} epochs",
        result.curve.len()
    );
    assert!(elapsed < 600.0, "overfit test took {elapsed:.0}s");
    pass(
        7,
        "synthetic overfit",
        format!(
            "head-only detector reached train accuracy {train_accuracy:.3} in {} epochs ({elapsed:.0}s)",
            result.curve.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8-10. published profile reproduction (structural; no artifacts needed)
// ---------------------------------------------------------------------------

fn criterion_08_parameter_counts() {
    let mut lines = Vec::new();
    for arch in Architecture::ALL {
        let det = build_detector(&DetectorConfig {
            arch,
            init: InitMode::Random,
            freeze_backbone: true,
            dropout_rate: 0.0,
        })
        .unwrap();
        let (total, _) = det.parameter_counts();
        let head = 2 * det.feature_dim() + 2;
        let (reference_m, _) = reference_profile(arch);
        let rel = (total as f64 / 1e6 - reference_m).abs() / reference_m;
        assert!(
            rel <= 0.02,
            "{arch}: {total} params vs reference {reference_m}M (rel {rel:.4})"
        );
        lines.push(format!(
            "{arch} {:.2}M (backbone {} + head {head}) vs {reference_m}M [{:.3}%]",
            total as f64 / 1e6,
            total - head,
            rel * 100.0
        ));
    }
    pass(8, "parameter counts", lines.join("; "));
}

fn criterion_09_flop_estimates() {
    let mut lines = Vec::new();
    for arch in Architecture::ALL {
        let det = build_detector(&DetectorConfig {
            arch,
            init: InitMode::Random,
            freeze_backbone: true,
            dropout_rate: 0.0,
        })
        .unwrap();
        let gflops = count_flops(&det, arch.native_input_side()).unwrap();
        let (_, reference) = reference_profile(arch);
        let rel = (gflops - reference).abs() / reference;
        assert!(
            rel <= 0.05,
            "{arch}: {gflops:.2} GFLOPs vs reference {reference} (rel {rel:.4})"
        );
        lines.push(format!("{arch} {gflops:.2} vs {reference} [{:.2}%]", rel * 100.0));
    }
    pass(
        9,
        "flop estimates",
        format!("2-flops-per-MAC at 224px: {}", lines.join("; ")),
    );
}

fn criterion_10_latency_ordering() {
    let mut means = Vec::new();
    for arch in Architecture::ALL {
        let det = build_detector(&DetectorConfig {
            arch,
            init: InitMode::Random,
            freeze_backbone: true,
            dropout_rate: 0.0,
        })
        .unwrap();
        let (mean, std) = measure_latency(&det, 224, 10, 3).unwrap();
        means.push((arch, mean, std));
    }
    let get = |a: Architecture| means.iter().find(|(x, _, _)| *x == a).unwrap().1;
    let vit = get(Architecture::VitB32);
    let resnet = get(Architecture::Resnet50);
    let convnext = get(Architecture::ConvnextBase);
    assert!(
        vit < resnet && resnet < convnext,
        "ordering violated: vit {vit:.1}ms, resnet {resnet:.1}ms, convnext {convnext:.1}ms"
    );

    // stability smoke check: two sessions on the same idle machine agree
    let det = build_detector(&DetectorConfig {
        arch: Architecture::VitB32,
        init: InitMode::Random,
        freeze_backbone: true,
        dropout_rate: 0.0,
    })
    .unwrap();
    let (first, _) = measure_latency(&det, 96, 15, 3).unwrap();
    let (second, _) = measure_latency(&det, 96, 15, 3).unwrap();
    let spread = (first - second).abs() / first.min(second);
    assert!(
        spread < 0.25,
        "repeat sessions diverged by {:.0}% ({first:.1}ms vs {second:.1}ms)",
        spread * 100.0
    );
    pass(
        10,
        "latency ordering",
        format!("vit_b32 {vit:.1}ms < resnet50 {resnet:.1}ms < convnext_base {convnext:.1}ms (batch 1, 224px, this host); repeat sessions within {:.0}%", spread * 100.0),
    );
}

// ---------------------------------------------------------------------------
// 11-13. benchmark reproduction (conditional on external artifacts)
// ---------------------------------------------------------------------------

const BENCH_MANIFEST_ENV: &str = "DFKIT_BENCH_MANIFEST";
const BENCH_ROOT_ENV: &str = "DFKIT_BENCH_ROOT";
const BENCH_CKPT_ENV: &str = "DFKIT_BENCH_CKPT_DIR";

fn bench_manifest() -> Option<(PathBuf, PathBuf)> {
    let manifest = env_path(BENCH_MANIFEST_ENV)?;
    let root = env_path(BENCH_ROOT_ENV)
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    Some((manifest, root))
}

fn criterion_11_best_cell_val_accuracies() {
    let Some((manifest_file, root)) = bench_manifest() else {
        skip(
            11,
            "best-cell validation accuracies",
            format!("needs the benchmark dataset ({BENCH_MANIFEST_ENV}) plus pretrained weights ({}) and hours of training", dfkit::model::WEIGHTS_DIR_ENV),
        );
        return;
    };
    if std::env::var_os(dfkit::model::WEIGHTS_DIR_ENV).is_none() {
        skip(11, "best-cell validation accuracies", format!("set {}", dfkit::model::WEIGHTS_DIR_ENV));
        return;
    }
    use dfkit::sweep::{run_sweep, SchedulerKind, SweepGrid, SweepShared};
    use dfkit::train::DataSpec;

    let out = std::env::temp_dir().join("dfkit-acceptance-sweep");
    let targets: [(Architecture, InitMode, f64, f64); 3] = [
        (Architecture::ConvnextBase, InitMode::Clip, 1e-5, 0.846),
        (Architecture::VitB32, InitMode::Clip, 1e-5, 0.838),
        (Architecture::Resnet50, InitMode::Imagenet, 1e-4, 0.812),
    ];
    for (arch, init, lr, expected) in targets {
        let grid = SweepGrid {
            archs: vec![arch],
            inits: vec![init],
            schedulers: vec![SchedulerKind::Cosine],
            lrs: vec![lr],
            shared: SweepShared::default(),
            data: DataSpec {
                manifest_file: manifest_file.clone(),
                root: root.clone(),
                splits_file: None,
            },
            cache_root: None,
        };
        let results = run_sweep(&grid, &out, true).unwrap();
        let acc = results[0]
            .best_val_accuracy
            .expect("cell should complete");
        assert!(
            (acc - expected).abs() <= 0.03,
            "{arch}/{init}: {acc:.3} vs expected {expected} ± 0.03"
        );
    }
    pass(11, "best-cell validation accuracies", "all three cells within ±0.03".into());
}

fn criterion_12_test_metrics() {
    let Some((manifest_file, root)) = bench_manifest() else {
        skip(
            12,
            "benchmark test metrics",
            format!("needs the benchmark dataset ({BENCH_MANIFEST_ENV}) and trained checkpoints ({BENCH_CKPT_ENV})"),
        );
        return;
    };
    let Some(ckpt_dir) = env_path(BENCH_CKPT_ENV) else {
        skip(12, "benchmark test metrics", format!("set {BENCH_CKPT_ENV}"));
        return;
    };
    use dfkit::model::checkpoint::load_detector;
    use dfkit::preprocess::{eval_transform, open_image, PreprocessConfig};

    let expected = [
        (Architecture::Resnet50, 0.79),
        (Architecture::VitB32, 0.81),
        (Architecture::ConvnextBase, 0.81),
    ];
    let manifest = load_manifest(&manifest_file, &root).unwrap();
    for (arch, expected_acc) in expected {
        let (detector, _) =
            load_detector(&ckpt_dir.join(format!("{}.ckpt", arch.name()))).unwrap();
        let pp = PreprocessConfig::with_normalization(detector.normalization());
        let mut preds = Vec::new();
        for record in manifest.records_in(Split::Test) {
            let img = open_image(&record.path).unwrap();
            let tensor = eval_transform(&img, &pp).unwrap();
            let score = detector
                .predict_scores(&tensor.unsqueeze(0).unwrap())
                .unwrap()[0];
            preds.push(ScoredPrediction::new(record.id.clone(), score as f64, record.label));
        }
        let report = evaluate(&preds, 0.5).unwrap();
        assert!(
            (report.accuracy - expected_acc).abs() <= 0.03,
            "{arch}: accuracy {:.3} vs {expected_acc} ± 0.03",
            report.accuracy
        );
        if arch == Architecture::ConvnextBase {
            let auc = report.roc_auc.unwrap();
            let ap = report.average_precision.unwrap();
            let recall = report.recall_at_precision_1.unwrap();
            assert!((auc - 0.89).abs() <= 0.03, "roc auc {auc:.3}");
            assert!((ap - 0.94).abs() <= 0.03, "average precision {ap:.3}");
            assert!(recall >= 0.30, "recall at precision 1 was {recall:.3}");
        }
    }
    pass(12, "benchmark test metrics", "accuracies, AUC, AP, and zero-FP recall within bounds".into());
}

fn criterion_13_no_skill_baseline() {
    let Some((manifest_file, root)) = bench_manifest() else {
        skip(
            13,
            "no-skill baseline",
            format!("needs the benchmark manifest ({BENCH_MANIFEST_ENV}); synthetic equivalents are covered by unit tests"),
        );
        return;
    };
    let manifest = load_manifest(&manifest_file, &root).unwrap();
    let baseline = no_skill_baseline(&manifest).unwrap();
    assert!(
        (baseline - 0.61).abs() < 0.005,
        "no-skill baseline {baseline:.4} should round to 0.61"
    );
    pass(13, "no-skill baseline", format!("{baseline:.4} rounds to 0.61"));
}
