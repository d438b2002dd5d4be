//! Gradient-weighted class activation maps.
//!
//! The map for class c is ReLU(sum_k alpha_k A^k) where A^k are the target
//! layer's feature maps and alpha_k is the spatial mean of d(logit_c)/dA^k.
//! The target is the raw logit, not the softmax, so saturation cannot zero
//! the gradients. Maps are max-normalized to [0,1]; an all-zero map is kept
//! as-is and flagged instead of dividing by zero.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::model::layers::bilinear_resize_tokens;
use crate::model::Detector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Max-normalized map at the target layer's spatial resolution.
    pub grid: Vec<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Map bilinearly upsampled to the input pixel grid.
    pub upsampled: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub target_class: Label,
    /// True when every gradient was zero (constant logit); the map is all
    /// zeros rather than an error.
    pub zero_flagged: bool,
}

/// The channel-weighted, rectified combination at the heart of the method:
/// out[y,x] = ReLU(sum_k mean(grads_k) * maps[k][y,x]).
///
/// `maps` and `grads` are (k, h, w) row-major.
pub fn weighted_combination(maps: &[f32], grads: &[f32], k: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0f32; hw];
    for ch in 0..k {
        let plane = &maps[ch * hw..(ch + 1) * hw];
        let gplane = &grads[ch * hw..(ch + 1) * hw];
        let alpha = gplane.iter().sum::<f32>() / hw as f32;
        for (o, v) in out.iter_mut().zip(plane) {
            *o += alpha * v;
        }
    }
    for o in out.iter_mut() {
        if *o < 0.0 {
            *o = 0.0;
        }
    }
    out
}

/// Compute the class activation heatmap for one image tensor (3,S,S) or
/// (1,3,S,S). Deterministic; inference mode throughout.
pub fn gradcam(detector: &Detector, image: &Tensor, target_class: Label) -> Result<Heatmap> {
    let batch = if image.rank() == 3 {
        image.unsqueeze(0)?
    } else {
        image.clone()
    };
    let (_, _, in_h, in_w) = batch.dims4()?;

    let trace = detector.cam_forward(&batch)?;
    let logit = trace
        .logits
        .narrow(0, 0, 1)?
        .narrow(1, target_class.class_index(), 1)?
        .squeeze(1)?
        .squeeze(0)?;
    let grads = logit.backward()?;

    let activation = detector.activation_grid(trace.var.as_tensor())?;
    let (_, k, gh, gw) = activation.dims4()?;
    let maps = activation.flatten_all()?.to_vec1::<f32>()?;

    let (grid, zero_flagged) = match grads.get(trace.var.as_tensor()) {
        Some(grad) => {
            let grad_grid = detector.activation_grid(grad)?;
            let gvals = grad_grid.flatten_all()?.to_vec1::<f32>()?;
            if gvals.iter().all(|v| *v == 0.0) {
                (vec![0f32; gh * gw], true)
            } else {
                (weighted_combination(&maps, &gvals, k, gh, gw), false)
            }
        }
        // the logit did not depend on the activation at all
        None => (vec![0f32; gh * gw], true),
    };

    let max = grid.iter().cloned().fold(0f32, f32::max);
    let (grid, zero_flagged) = if max > 0.0 {
        (grid.iter().map(|v| v / max).collect::<Vec<f32>>(), zero_flagged)
    } else {
        (vec![0f32; gh * gw], true)
    };

    let upsampled = bilinear_resize_tokens(&grid, gh, gw, 1, in_h, in_w);
    Ok(Heatmap {
        grid,
        grid_h: gh,
        grid_w: gw,
        upsampled,
        height: in_h,
        width: in_w,
        target_class,
        zero_flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    /// Intensity maps to blue, matching the overlay style of the figures.
    Blue,
    Jet,
}

impl Colormap {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blue" => Some(Colormap::Blue),
            "jet" => Some(Colormap::Jet),
            _ => None,
        }
    }

    fn color(&self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Blue => [0.0, 0.25 * v, v],
            Colormap::Jet => {
                let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
                let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
                let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
                [r, g, b]
            }
        }
    }
}

/// Alpha-blend the heatmap over the image: per pixel, weight = blend * heat.
/// A zero heatmap therefore reproduces the input exactly, and blend 1.0 with
/// a saturated map yields the pure colormap.
pub fn overlay(
    image: &RgbImage,
    heatmap: &Heatmap,
    colormap: Colormap,
    blend: f32,
) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if (heatmap.width, heatmap.height) != (w as usize, h as usize) {
        return Err(Error::OverlaySizeMismatch {
            heatmap: (heatmap.width, heatmap.height),
            image: (w as usize, h as usize),
        });
    }
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in image.enumerate_pixels() {
        let heat = heatmap.upsampled[y as usize * heatmap.width + x as usize];
        let weight = (blend * heat).clamp(0.0, 1.0);
        let color = colormap.color(heat);
        let mut blended = [0u8; 3];
        for c in 0..3 {
            let base = px.0[c] as f32 / 255.0;
            let v = base * (1.0 - weight) + color[c] * weight;
            blended[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        out.put_pixel(x, y, image::Rgb(blended));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// portable array format (npy v1.0, little-endian f32, C order)
// ---------------------------------------------------------------------------

/// Write the raw (un-normalized-resolution) grid as an npy array.
pub fn write_heatmap_npy(path: &Path, heatmap: &Heatmap) -> Result<()> {
    write_npy_f32(path, &heatmap.grid, &[heatmap.grid_h, heatmap.grid_w])
}

pub fn write_npy_f32(path: &Path, data: &[f32], shape: &[usize]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}");
    // pad so magic + version + len + header is 64-byte aligned, newline-final
    let unpadded = 10 + header.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(padding));
    header.push('\n');

    let mut bytes = Vec::with_capacity(10 + header.len() + data.len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Minimal reader used by tests to confirm the writer's framing.
pub fn read_npy_f32(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    if bytes.len() < 10 || &bytes[0..8] != b"\x93NUMPY\x01\x00" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: "bad npy magic".into(),
        });
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        reason: "bad npy header".into(),
    })?;
    let shape_part = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            reason: "missing shape".into(),
        })?;
    let shape: Vec<usize> = shape_part
        .split(',')
        .filter_map(|t| t.trim().parse().ok())
        .collect();
    let data: Vec<f32> = bytes[10 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((data, shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn combination_is_relu_of_weighted_sum() {
        // single channel, constant positive gradient: map is the positive part
        let maps = vec![1.0f32, -2.0, 0.5, -0.25];
        let grads = vec![2.0f32; 4];
        let out = weighted_combination(&maps, &grads, 1, 2, 2);
        assert_eq!(out, vec![2.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn combination_is_degree_two_homogeneous() {
        let maps: Vec<f32> = (0..2 * 9).map(|i| (i as f32 * 0.37).sin()).collect();
        let grads: Vec<f32> = (0..2 * 9).map(|i| (i as f32 * 0.11).cos()).collect();
        let lambda = 3.0f32;
        let base = weighted_combination(&maps, &grads, 2, 3, 3);
        let scaled_maps: Vec<f32> = maps.iter().map(|v| v * lambda).collect();
        let scaled_grads: Vec<f32> = grads.iter().map(|v| v * lambda).collect();
        let scaled = weighted_combination(&scaled_maps, &scaled_grads, 2, 3, 3);
        for (s, b) in scaled.iter().zip(&base) {
            assert!((s - lambda * lambda * b).abs() < 1e-3, "{s} vs {b}");
        }
    }

    #[test]
    fn candle_gradient_matches_finite_differences_on_toy_model() {
        // toy: y = sum_k w_k * mean(A_k); linear in A, so central differences
        // are exact up to rounding
        let dev = Device::Cpu;
        let k = 3;
        let (h, w) = (4, 4);
        let weights = [0.7f32, -0.3, 0.15];
        let a_data: Vec<f32> = (0..k * h * w).map(|i| ((i * 37 % 17) as f32) / 7.0).collect();
        let a = Var::from_tensor(
            &Tensor::from_vec(a_data.clone(), (1, k, h, w), &dev).unwrap(),
        )
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

        // finite differences on a handful of positions
        let eps = 0.1f32;
        let eval = |data: &[f32]| -> f32 {
            let mut total = 0.0;
            for ch in 0..k {
                let mean: f32 =
                    data[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>() / (h * w) as f32;
                total += weights[ch] * mean;
            }
            total
        };
        for idx in [0usize, 5, 16, 21, 33, 47] {
            let mut plus = a_data.clone();
            plus[idx] += eps;
            let mut minus = a_data.clone();
            minus[idx] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: autograd {} vs fd {fd}", grad[idx]);
        }
    }

    #[test]
    fn overlay_identity_and_saturation() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([10, 200, 30]));
        let zero = Heatmap {
            grid: vec![0.0; 4],
            grid_h: 2,
            grid_w: 2,
            upsampled: vec![0.0; 16],
            height: 4,
            width: 4,
            target_class: Label::Fake,
            zero_flagged: true,
        };
        let out = overlay(&img, &zero, Colormap::Blue, 0.6).unwrap();
        assert_eq!(out, img);

        let ones = Heatmap {
            grid: vec![1.0; 4],
            grid_h: 2,
            grid_w: 2,
            upsampled: vec![1.0; 16],
            height: 4,
            width: 4,
            target_class: Label::Fake,
            zero_flagged: false,
        };
        let out = overlay(&img, &ones, Colormap::Blue, 1.0).unwrap();
        // pure colormap at v=1: (0, 0.25, 1.0) in unit scale
        for px in out.pixels() {
            assert_eq!(px.0, [0, 64, 255]);
        }

        let mismatched = RgbImage::new(3, 3);
        assert!(matches!(
            overlay(&mismatched, &ones, Colormap::Blue, 0.5),
            Err(Error::OverlaySizeMismatch { .. })
        ));
    }

    #[test]
    fn overlay_preserves_structure() {
        // checkerboard heatmap: hot pixels shift toward the colormap,
        // cold pixels stay identical
        let img = RgbImage::from_pixel(2, 2, image::Rgb([100, 100, 100]));
        let heat = Heatmap {
            grid: vec![1.0, 0.0, 0.0, 1.0],
            grid_h: 2,
            grid_w: 2,
            upsampled: vec![1.0, 0.0, 0.0, 1.0],
            height: 2,
            width: 2,
            target_class: Label::Fake,
            zero_flagged: false,
        };
        let out = overlay(&img, &heat, Colormap::Blue, 0.5).unwrap();
        assert_eq!(out.get_pixel(1, 0).0, [100, 100, 100]);
        assert_eq!(out.get_pixel(0, 1).0, [100, 100, 100]);
        assert_ne!(out.get_pixel(0, 0).0, [100, 100, 100]);
        assert_eq!(out.get_pixel(0, 0).0, out.get_pixel(1, 1).0);
    }

    #[test]
    fn npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.npy");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5).collect();
        write_npy_f32(&path, &data, &[3, 4]).unwrap();
        let (back, shape) = read_npy_f32(&path).unwrap();
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(back, data);
        // header block is 64-byte aligned
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!((bytes.len() - 12 * 4) % 64, 0);
    }

}
