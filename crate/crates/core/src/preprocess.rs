//! Image caching, train-time augmentation, and normalization.
//!
//! The cache pass rescales each image so its short side is `cache_short_side`
//! (never upscaling). Training draws a random square crop of 50-100% of the
//! short side and rescales it to `train_side`; evaluation is the
//! deterministic resize + center crop. All resizes are bilinear without
//! corner alignment.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, DatasetManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormSource {
    Imagenet,
    Clip,
}

/// Per-channel statistics applied as (x - mean) / std after scaling to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub source: NormSource,
}

impl NormalizationStats {
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            source: NormSource::Imagenet,
        }
    }

    pub fn clip() -> Self {
        Self {
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
            source: NormSource::Clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "normalization std must be strictly positive, got {:?}",
                self.std
            )));
        }
        Ok(())
    }
}

/// Whether the crop fraction scales the short side or the area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    ShortSide,
    Area,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub cache_short_side: u32,
    pub train_crop_fraction_range: (f64, f64),
    pub crop_mode: CropMode,
    pub train_side: u32,
    pub eval_side: u32,
    pub normalization: NormalizationStats,
}

impl PreprocessConfig {
    pub fn with_normalization(normalization: NormalizationStats) -> Self {
        Self {
            cache_short_side: 384,
            train_crop_fraction_range: (0.5, 1.0),
            crop_mode: CropMode::ShortSide,
            train_side: 256,
            eval_side: 256,
            normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.train_crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "crop fraction range must satisfy 0 < low <= high <= 1, got ({lo}, {hi})"
            )));
        }
        if self.cache_short_side == 0 || self.train_side == 0 || self.eval_side == 0 {
            return Err(Error::InvalidConfig("pixel sizes must be positive".into()));
        }
        self.normalization.validate()
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::with_normalization(NormalizationStats::imagenet())
    }
}

pub fn open_image(path: &Path) -> Result<DynamicImage> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::DegenerateImage {
            width: w,
            height: h,
        });
    }
    Ok(img)
}

/// Rescale so the short side equals `cache_short_side`, preserving aspect
/// ratio. Images whose short side is already at or below the target pass
/// through unchanged; the cache never upscales.
pub fn cache_resize(image: &DynamicImage, cfg: &PreprocessConfig) -> DynamicImage {
    let (w, h) = image.dimensions();
    let short = w.min(h);
    if short <= cfg.cache_short_side {
        return image.clone();
    }
    let scale = cfg.cache_short_side as f64 / short as f64;
    let (nw, nh) = if w <= h {
        (
            cfg.cache_short_side,
            ((h as f64 * scale).round() as u32).max(cfg.cache_short_side),
        )
    } else {
        (
            ((w as f64 * scale).round() as u32).max(cfg.cache_short_side),
            cfg.cache_short_side,
        )
    };
    image.resize_exact(nw, nh, FilterType::Triangle)
}

fn crop_side(short: u32, fraction: f64, mode: CropMode) -> u32 {
    let side = match mode {
        CropMode::ShortSide => fraction * short as f64,
        CropMode::Area => fraction.sqrt() * short as f64,
    };
    (side.round() as u32).clamp(1, short)
}

/// Random square crop (fraction of the short side, uniform position) resized
/// to `train_side` and normalized. Pure in (image, rng state, config).
pub fn train_transform<R: Rng>(
    image: &DynamicImage,
    rng: &mut R,
    cfg: &PreprocessConfig,
) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let short = w.min(h);
    if short < 2 {
        return Err(Error::DegenerateImage {
            width: w,
            height: h,
        });
    }
    let (lo, hi) = cfg.train_crop_fraction_range;
    let u: f64 = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let side = crop_side(short, u, cfg.crop_mode);
    let max_x = w - side;
    let max_y = h - side;
    let x0 = if max_x == 0 {
        0
    } else {
        rng.random_range(0..=max_x)
    };
    let y0 = if max_y == 0 {
        0
    } else {
        rng.random_range(0..=max_y)
    };
    let crop = image.crop_imm(x0, y0, side, side);
    let resized = crop.resize_exact(cfg.train_side, cfg.train_side, FilterType::Triangle);
    to_normalized_tensor(&resized.to_rgb8(), &cfg.normalization)
}

/// The resized, center-cropped RGB view the eval path normalizes; also used
/// as the base image for heatmap overlays.
pub fn eval_view(image: &DynamicImage, cfg: &PreprocessConfig) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::DegenerateImage {
            width: w,
            height: h,
        });
    }
    let side = cfg.eval_side;
    let short = w.min(h);
    let resized = if short == side {
        image.clone()
    } else {
        let scale = side as f64 / short as f64;
        let (nw, nh) = if w <= h {
            (side, ((h as f64 * scale).round() as u32).max(side))
        } else {
            (((w as f64 * scale).round() as u32).max(side), side)
        };
        image.resize_exact(nw, nh, FilterType::Triangle)
    };
    let (rw, rh) = resized.dimensions();
    let x0 = (rw - side) / 2;
    let y0 = (rh - side) / 2;
    Ok(resized.crop_imm(x0, y0, side, side).to_rgb8())
}

/// Deterministic eval path: resize the short side to `eval_side`, center-crop
/// a square, normalize.
pub fn eval_transform(image: &DynamicImage, cfg: &PreprocessConfig) -> Result<Tensor> {
    let view = eval_view(image, cfg)?;
    to_normalized_tensor(&view, &cfg.normalization)
}

/// [3, H, W] float tensor: scale to [0,1] then per-channel (x - mean) / std.
pub fn to_normalized_tensor(image: &RgbImage, norm: &NormalizationStats) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (y, row) in image.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                let v = px.0[c] as f32 / 255.0;
                data[c * w * h + y * w + x] = (v - norm.mean[c]) / norm.std[c];
            }
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Undo [`to_normalized_tensor`]; used by tests and overlay rendering.
pub fn denormalize(tensor: &Tensor, norm: &NormalizationStats) -> Result<Vec<f32>> {
    let (c, h, w) = tensor.dims3()?;
    debug_assert_eq!(c, 3);
    let data = tensor.flatten_all()?.to_vec1::<f32>()?;
    let mut out = vec![0f32; data.len()];
    for ch in 0..3 {
        for i in 0..h * w {
            out[ch * h * w + i] = data[ch * h * w + i] * norm.std[ch] + norm.mean[ch];
        }
    }
    Ok(out)
}

pub const CACHE_META_FILE: &str = "cache_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub version: u32,
    pub cache_short_side: u32,
    pub interpolation: String,
}

/// Resize every manifest image into `cache_root/<id>.png` (atomic writes,
/// parallel across images) and record the settings in a sidecar meta file.
pub fn build_cache(
    manifest: &DatasetManifest,
    cache_root: &Path,
    cfg: &PreprocessConfig,
) -> Result<usize> {
    std::fs::create_dir_all(cache_root)
        .map_err(|e| Error::io(format!("create {}", cache_root.display()), e))?;
    let meta = CacheMeta {
        version: 1,
        cache_short_side: cfg.cache_short_side,
        interpolation: "bilinear".into(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::InvalidConfig(format!("serialize cache meta: {e}")))?;
    write_atomic(&cache_root.join(CACHE_META_FILE), meta_json.as_bytes())?;

    let written: Result<Vec<usize>> = manifest
        .records
        .par_iter()
        .map(|record| {
            let dest = cached_path(cache_root, &record.id);
            if dest.exists() {
                return Ok(0usize);
            }
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
            }
            let img = open_image(&record.path)?;
            let resized = cache_resize(&img, cfg);
            let tmp = dest.with_extension(format!("tmp-{}", std::process::id()));
            resized
                .to_rgb8()
                .save_with_format(&tmp, image::ImageFormat::Png)
                .map_err(|e| Error::ImageDecode {
                    path: tmp.clone(),
                    source: e,
                })?;
            std::fs::rename(&tmp, &dest)
                .map_err(|e| Error::io(format!("rename to {}", dest.display()), e))?;
            Ok(1)
        })
        .collect();
    Ok(written?.into_iter().sum())
}

pub fn cached_path(cache_root: &Path, id: &str) -> PathBuf {
    cache_root.join(format!("{id}.png"))
}

/// Prefer the cached copy, falling back to the original file.
pub fn open_for_training(
    cache_root: Option<&Path>,
    id: &str,
    original: &Path,
) -> Result<DynamicImage> {
    if let Some(root) = cache_root {
        let cached = cached_path(root, id);
        if cached.exists() {
            return open_image(&cached);
        }
    }
    open_image(original)
}
