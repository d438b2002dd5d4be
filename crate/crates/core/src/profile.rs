//! Deployment-cost reporting: analytic FLOP counts, parameter counts, and
//! batch-1 inference latency.
//!
//! FLOPs are counted as 2 x multiply-accumulates over conv / linear /
//! attention matmuls (elementwise and normalization work excluded); the
//! convention string is embedded in every report so numbers stay comparable.
//! Reference figures correspond to each backbone's native 224 px input.

use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::LayerSpec;
use crate::model::{Architecture, Detector, ForwardMode, InitMode};

pub const FLOPS_CONVENTION: &str =
    "2 flops per MAC over conv/linear/attention matmuls; elementwise excluded";

pub const MIN_RUNS: usize = 10;
pub const MIN_WARMUP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub arch: Architecture,
    pub init: InitMode,
    pub params_millions: f64,
    pub trainable_params_millions: f64,
    /// Image-encoder parameter count from the open model-profile table the
    /// canonical structures follow; present so any mismatch (e.g. the classic
    /// supervised ResNet-50) is visible rather than hidden.
    pub reference_params_millions: Option<f64>,
    pub gflops: f64,
    pub reference_gflops: Option<f64>,
    pub flops_convention: String,
    pub input_side: usize,
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    pub batch_size: usize,
    pub hardware: String,
    pub n_runs: usize,
    pub n_warmup: usize,
}

/// Reference (params_millions, gflops) at 224 px for the canonical
/// structures, from the open model-profile table.
pub fn reference_profile(arch: Architecture) -> (f64, f64) {
    match arch {
        Architecture::Resnet50 => (38.32, 12.22),
        Architecture::VitB32 => (87.85, 8.82),
        Architecture::ConvnextBase => (88.09, 30.71),
    }
}

/// Multiply-accumulate count for one layer. Layers without a registered
/// counter are an error, never a silent zero.
pub fn layer_macs(spec: &LayerSpec) -> Result<u64> {
    Ok(match spec {
        LayerSpec::Conv {
            in_c,
            out_c,
            kernel,
            groups,
            out_h,
            out_w,
            ..
        } => (in_c / groups * kernel * kernel * out_c * out_h * out_w) as u64,
        LayerSpec::Linear {
            in_f, out_f, tokens, ..
        } => (in_f * out_f * tokens) as u64,
        LayerSpec::AttentionMatmul { tokens, dim, .. } => (2 * tokens * tokens * dim) as u64,
        LayerSpec::Norm { .. } | LayerSpec::Activation { .. } | LayerSpec::Pool { .. } => 0,
        LayerSpec::Custom { kind, .. } => {
            return Err(Error::UnknownLayerKind(kind.clone()));
        }
    })
}

pub fn total_macs(specs: &[LayerSpec]) -> Result<u64> {
    let mut total = 0u64;
    for spec in specs {
        total += layer_macs(spec)?;
    }
    Ok(total)
}

/// Analytic GFLOPs for one forward pass at the given square input size.
pub fn count_flops(detector: &Detector, input_side: usize) -> Result<f64> {
    let specs = detector.layer_specs(input_side);
    let macs = total_macs(&specs)?;
    Ok(2.0 * macs as f64 / 1e9)
}

/// Wall-clock statistics over `n_runs` invocations of `f` after `n_warmup`
/// discarded runs. Returns (mean_ms, std_ms) with the sample deviation.
pub fn measure_latency_fn<F>(mut f: F, n_runs: usize, n_warmup: usize) -> Result<(f64, f64)>
where
    F: FnMut() -> Result<()>,
{
    if n_runs < MIN_RUNS || n_warmup < MIN_WARMUP {
        return Err(Error::LatencyConfig {
            min_runs: MIN_RUNS,
            min_warmup: MIN_WARMUP,
        });
    }
    for _ in 0..n_warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1000.0);
    }
    let mean = samples.iter().sum::<f64>() / n_runs as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_runs - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// Batch-1 forward latency. CPU execution is synchronous, so the wall clock
/// brackets the full forward; preprocessing is deliberately excluded.
pub fn measure_latency(
    detector: &Detector,
    input_side: usize,
    n_runs: usize,
    n_warmup: usize,
) -> Result<(f64, f64)> {
    let input = Tensor::randn(0f32, 1f32, (1, 3, input_side, input_side), &Device::Cpu)?;
    measure_latency_fn(
        || {
            let logits = detector.forward(&input, ForwardMode::Eval)?;
            // touch the output so the forward cannot be elided
            let _ = logits.flatten_all()?.to_vec1::<f32>()?;
            Ok(())
        },
        n_runs,
        n_warmup,
    )
}

pub fn hardware_descriptor() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1).map(|s| s.trim().to_string()))
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("cpu: {model} ({cores} threads)")
}

/// Full cost report for a detector at one input size.
pub fn profile_detector(
    detector: &Detector,
    input_side: usize,
    n_runs: usize,
    n_warmup: usize,
) -> Result<ProfileReport> {
    let (total, trainable) = detector.parameter_counts();
    let gflops = count_flops(detector, input_side)?;
    let (mean, std) = measure_latency(detector, input_side, n_runs, n_warmup)?;
    let (ref_params, ref_gflops) = reference_profile(detector.config.arch);
    let canonical = detector.config.init != InitMode::Imagenet
        && input_side == detector.config.arch.native_input_side();
    Ok(ProfileReport {
        arch: detector.config.arch,
        init: detector.config.init,
        params_millions: total as f64 / 1e6,
        trainable_params_millions: trainable as f64 / 1e6,
        reference_params_millions: Some(ref_params).filter(|_| canonical),
        gflops,
        reference_gflops: Some(ref_gflops).filter(|_| canonical),
        flops_convention: FLOPS_CONVENTION.into(),
        input_side,
        latency_ms_mean: mean,
        latency_ms_std: std,
        batch_size: 1,
        hardware: hardware_descriptor(),
        n_runs,
        n_warmup,
    })
}

pub fn write_profile(path: &Path, report: &ProfileReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidConfig(format!("serialize profile: {e}")))?;
    crate::data::write_atomic(path, json.as_bytes())
}

/// Aligned text table over several profiles, one row per model.
pub fn render_table(reports: &[ProfileReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<15} {:>12} {:>10} {:>22}\n",
        "Model", "Params (M)", "GFLOPs", "Latency b=1 (ms)"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<15} {:>12.2} {:>10.2} {:>15.2} ± {:.2}\n",
            r.arch.name(),
            r.params_millions,
            r.gflops,
            r.latency_ms_mean,
            r.latency_ms_std
        ));
    }
    out
}
