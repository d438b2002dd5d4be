//! Checkpoint files: a single safetensors archive whose header metadata makes
//! it self-describing (format id, detector config, normalization source, and
//! any trainer bookkeeping). Weights and optimizer state are ordinary named
//! tensors inside the same file.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::preprocess::NormSource;

pub const FORMAT_ID: &str = "dfkit-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: DetectorConfig,
    pub normalization: NormSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_accuracy: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(detector: &Detector) -> Self {
        Self {
            format: FORMAT_ID.into(),
            version: FORMAT_VERSION,
            config: detector.config,
            normalization: detector.norm_source(),
            epoch: None,
            best_val_accuracy: None,
        }
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Serialize named tensors plus metadata into one safetensors file
/// (write-to-temp, atomic rename).
pub fn save_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
    extra_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        buffers.push((name.clone(), t.dims().to_vec(), tensor_bytes(t)?));
    }
    let views: Vec<(String, TensorView)> = buffers
        .iter()
        .map(|(name, dims, bytes)| {
            let view = TensorView::new(Dtype::F32, dims.clone(), bytes)
                .expect("buffer length matches dims");
            (name.clone(), view)
        })
        .collect();

    let mut metadata: HashMap<String, String> = HashMap::new();
    metadata.insert(
        "dfkit".to_string(),
        serde_json::to_string(meta).map_err(|e| Error::InvalidConfig(format!("meta: {e}")))?,
    );
    for (k, v) in extra_meta {
        metadata.insert(k.clone(), v.clone());
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"),
        std::process::id()
    ));
    safetensors::serialize_to_file(views, Some(metadata), &tmp).map_err(|e| {
        Error::CorruptWeights {
            path: tmp.clone(),
            reason: e.to_string(),
        }
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
}

pub struct LoadedArchive {
    pub meta: CheckpointMeta,
    pub extra_meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn load_archive(path: &Path) -> Result<LoadedArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::CorruptWeights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let raw_meta = header.metadata().clone().unwrap_or_default();
    let meta_json = raw_meta.get("dfkit").ok_or_else(|| Error::CorruptWeights {
        path: path.to_path_buf(),
        reason: "missing dfkit metadata header".into(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| Error::CorruptWeights {
        path: path.to_path_buf(),
        reason: format!("bad metadata: {e}"),
    })?;
    if meta.format != FORMAT_ID {
        return Err(Error::CorruptWeights {
            path: path.to_path_buf(),
            reason: format!("unknown format id {:?}", meta.format),
        });
    }
    if meta.version != FORMAT_VERSION {
        return Err(Error::CorruptWeights {
            path: path.to_path_buf(),
            reason: format!("unsupported version {}", meta.version),
        });
    }
    let extra_meta: BTreeMap<String, String> = raw_meta
        .into_iter()
        .filter(|(k, _)| k != "dfkit")
        .collect();
    let tensors: BTreeMap<String, Tensor> =
        candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
    Ok(LoadedArchive {
        meta,
        extra_meta,
        tensors,
    })
}

/// Save a detector's weights (head, backbone, and buffers).
pub fn save_detector(
    path: &Path,
    detector: &Detector,
    epoch: Option<usize>,
    best_val_accuracy: Option<f64>,
    extra_tensors: &BTreeMap<String, Tensor>,
    extra_meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut meta = CheckpointMeta::new(detector);
    meta.epoch = epoch;
    meta.best_val_accuracy = best_val_accuracy;
    let mut tensors = detector.param_store().snapshot();
    for (k, v) in extra_tensors {
        tensors.insert(k.clone(), v.clone());
    }
    save_archive(path, &tensors, &meta, extra_meta)
}

/// Rebuild a detector from a checkpoint, restoring every weight and buffer.
pub fn load_detector(path: &Path) -> Result<(Detector, LoadedArchive)> {
    let archive = load_archive(path)?;
    let mut backbone_weights = BTreeMap::new();
    let mut head_weights = BTreeMap::new();
    for (name, t) in &archive.tensors {
        if name.starts_with("backbone.") {
            backbone_weights.insert(name.clone(), t.clone());
        } else if name.starts_with("head.") {
            head_weights.insert(name.clone(), t.clone());
        }
        // anything else (optimizer state) is left to the caller
    }
    let detector = Detector::assemble(&archive.meta.config, Some(&backbone_weights), Some(&head_weights))?;
    Ok((detector, archive))
}

#[cfg(test)]
impl Detector {
    pub(crate) fn assemble_from_parts(
        config: &DetectorConfig,
        backbone: Option<&BTreeMap<String, Tensor>>,
        head: Option<&BTreeMap<String, Tensor>>,
    ) -> Result<Detector> {
        Detector::assemble(config, backbone, head)
    }
}
