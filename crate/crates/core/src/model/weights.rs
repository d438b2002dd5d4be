//! Pretrained weight loading.
//!
//! Artifacts are safetensors files. Four upstream naming schemes are
//! recognized and translated onto the canonical layout, in addition to
//! files already written with canonical names:
//!
//! - contrastive checkpoints (`visual.*`) for ResNet-50 and ViT-B/32
//! - `visual.trunk.*` timm-wrapped ConvNeXt contrastive checkpoints
//! - torchvision ResNet-50 / ViT-B/32 supervised checkpoints
//! - timm ConvNeXt-base supervised checkpoints
//!
//! Classifier heads and text towers are dropped; every other tensor must map
//! onto the canonical structure or loading fails.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use super::{Architecture, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scheme {
    Canonical,
    ClipResnet,
    ClipVit,
    OpenClipConvnext,
    TorchvisionResnet,
    TorchvisionVit,
    TimmConvnext,
}

#[derive(Debug, Clone)]
enum Transform {
    None,
    /// 2-d transpose (the CLIP ViT projection is stored input-major).
    Transpose,
    Reshape(Vec<usize>),
}

struct Mapping {
    foreign: String,
    canonical: String,
    transform: Transform,
}

fn mapping(foreign: impl Into<String>, canonical: impl Into<String>) -> Mapping {
    Mapping {
        foreign: foreign.into(),
        canonical: canonical.into(),
        transform: Transform::None,
    }
}

const BN_PARTS: [&str; 4] = ["weight", "bias", "running_mean", "running_var"];
const AFFINE_PARTS: [&str; 2] = ["weight", "bias"];
const RESNET_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const CONVNEXT_DEPTHS: [usize; 4] = [3, 3, 27, 3];

fn detect_scheme(keys: &[&str]) -> Result<Scheme> {
    let any = |pred: &dyn Fn(&str) -> bool| keys.iter().any(|k| pred(k));
    if any(&|k| k.starts_with("backbone.")) {
        Ok(Scheme::Canonical)
    } else if any(&|k| k.starts_with("visual.trunk.")) {
        Ok(Scheme::OpenClipConvnext)
    } else if any(&|k| k.starts_with("visual.transformer.resblocks")) {
        Ok(Scheme::ClipVit)
    } else if any(&|k| k.starts_with("visual.layer1.")) {
        Ok(Scheme::ClipResnet)
    } else if any(&|k| k.starts_with("encoder.layers.encoder_layer")) {
        Ok(Scheme::TorchvisionVit)
    } else if any(&|k| k.starts_with("stages.0.blocks.")) {
        Ok(Scheme::TimmConvnext)
    } else if any(&|k| k == "conv1.weight") && any(&|k| k.starts_with("layer1.0.conv1")) {
        Ok(Scheme::TorchvisionResnet)
    } else {
        Err(Error::CorruptWeights {
            path: Default::default(),
            reason: "unrecognized tensor naming scheme".into(),
        })
    }
}

fn resnet_block_mappings(foreign_root: &str, ds_conv: &str, ds_bn: &str) -> Vec<Mapping> {
    let mut maps = Vec::new();
    for (stage, &blocks) in RESNET_BLOCKS.iter().enumerate() {
        let layer = stage + 1;
        for j in 0..blocks {
            let f = format!("{foreign_root}layer{layer}.{j}");
            let c = format!("backbone.layer{layer}.{j}");
            for k in 1..=3 {
                maps.push(mapping(format!("{f}.conv{k}.weight"), format!("{c}.conv{k}.weight")));
                for part in BN_PARTS {
                    maps.push(mapping(format!("{f}.bn{k}.{part}"), format!("{c}.bn{k}.{part}")));
                }
            }
            if j == 0 {
                maps.push(mapping(
                    format!("{f}.downsample.{ds_conv}.weight"),
                    format!("{c}.downsample.conv.weight"),
                ));
                for part in BN_PARTS {
                    maps.push(mapping(
                        format!("{f}.downsample.{ds_bn}.{part}"),
                        format!("{c}.downsample.bn.{part}"),
                    ));
                }
            }
        }
    }
    maps
}

fn clip_resnet_mappings() -> Vec<Mapping> {
    let mut maps = Vec::new();
    for k in 1..=3 {
        maps.push(mapping(
            format!("visual.conv{k}.weight"),
            format!("backbone.stem.conv{k}.weight"),
        ));
        for part in BN_PARTS {
            maps.push(mapping(
                format!("visual.bn{k}.{part}"),
                format!("backbone.stem.bn{k}.{part}"),
            ));
        }
    }
    // the contrastive checkpoints index downsample [avgpool, conv, bn] as 0/1
    maps.extend(resnet_block_mappings("visual.", "0", "1"));
    maps.push(mapping(
        "visual.attnpool.positional_embedding",
        "backbone.attnpool.pos_embed",
    ));
    for (f, c) in [("q_proj", "q"), ("k_proj", "k"), ("v_proj", "v"), ("c_proj", "out")] {
        for part in AFFINE_PARTS {
            maps.push(mapping(
                format!("visual.attnpool.{f}.{part}"),
                format!("backbone.attnpool.{c}.{part}"),
            ));
        }
    }
    maps
}

fn torchvision_resnet_mappings() -> Vec<Mapping> {
    let mut maps = vec![mapping("conv1.weight", "backbone.stem.conv1.weight")];
    for part in BN_PARTS {
        maps.push(mapping(format!("bn1.{part}"), format!("backbone.stem.bn1.{part}")));
    }
    maps.extend(resnet_block_mappings("", "0", "1"));
    maps
}

fn clip_vit_mappings() -> Vec<Mapping> {
    let mut maps = vec![
        mapping("visual.conv1.weight", "backbone.patch.weight"),
        mapping("visual.class_embedding", "backbone.class_token"),
        mapping("visual.positional_embedding", "backbone.pos_embed"),
    ];
    for part in AFFINE_PARTS {
        maps.push(mapping(format!("visual.ln_pre.{part}"), format!("backbone.ln_pre.{part}")));
        maps.push(mapping(
            format!("visual.ln_post.{part}"),
            format!("backbone.ln_post.{part}"),
        ));
    }
    for i in 0..12 {
        let f = format!("visual.transformer.resblocks.{i}");
        let c = format!("backbone.blocks.{i}");
        for part in AFFINE_PARTS {
            maps.push(mapping(format!("{f}.ln_1.{part}"), format!("{c}.ln1.{part}")));
            maps.push(mapping(format!("{f}.ln_2.{part}"), format!("{c}.ln2.{part}")));
            maps.push(mapping(
                format!("{f}.attn.out_proj.{part}"),
                format!("{c}.attn.out.{part}"),
            ));
            maps.push(mapping(format!("{f}.mlp.c_fc.{part}"), format!("{c}.mlp.fc1.{part}")));
            maps.push(mapping(format!("{f}.mlp.c_proj.{part}"), format!("{c}.mlp.fc2.{part}")));
        }
        maps.push(mapping(format!("{f}.attn.in_proj_weight"), format!("{c}.attn.qkv.weight")));
        maps.push(mapping(format!("{f}.attn.in_proj_bias"), format!("{c}.attn.qkv.bias")));
    }
    maps.push(Mapping {
        foreign: "visual.proj".into(),
        canonical: "backbone.proj.weight".into(),
        transform: Transform::Transpose,
    });
    maps
}

fn torchvision_vit_mappings() -> Vec<Mapping> {
    let mut maps = vec![
        mapping("conv_proj.weight", "backbone.patch.weight"),
        mapping("conv_proj.bias", "backbone.patch.bias"),
        Mapping {
            foreign: "class_token".into(),
            canonical: "backbone.class_token".into(),
            transform: Transform::Reshape(vec![768]),
        },
        Mapping {
            foreign: "encoder.pos_embedding".into(),
            canonical: "backbone.pos_embed".into(),
            transform: Transform::Reshape(vec![50, 768]),
        },
    ];
    for i in 0..12 {
        let f = format!("encoder.layers.encoder_layer_{i}");
        let c = format!("backbone.blocks.{i}");
        for part in AFFINE_PARTS {
            maps.push(mapping(format!("{f}.ln_1.{part}"), format!("{c}.ln1.{part}")));
            maps.push(mapping(format!("{f}.ln_2.{part}"), format!("{c}.ln2.{part}")));
            maps.push(mapping(
                format!("{f}.self_attention.out_proj.{part}"),
                format!("{c}.attn.out.{part}"),
            ));
            maps.push(mapping(format!("{f}.mlp.0.{part}"), format!("{c}.mlp.fc1.{part}")));
            maps.push(mapping(format!("{f}.mlp.3.{part}"), format!("{c}.mlp.fc2.{part}")));
        }
        maps.push(mapping(
            format!("{f}.self_attention.in_proj_weight"),
            format!("{c}.attn.qkv.weight"),
        ));
        maps.push(mapping(
            format!("{f}.self_attention.in_proj_bias"),
            format!("{c}.attn.qkv.bias"),
        ));
    }
    for part in AFFINE_PARTS {
        maps.push(mapping(format!("encoder.ln.{part}"), format!("backbone.ln_post.{part}")));
    }
    maps
}

fn convnext_mappings(foreign_root: &str, with_proj: bool) -> Vec<Mapping> {
    let mut maps = vec![];
    for part in AFFINE_PARTS {
        maps.push(mapping(
            format!("{foreign_root}stem.0.{part}"),
            format!("backbone.stem.conv.{part}"),
        ));
        maps.push(mapping(
            format!("{foreign_root}stem.1.{part}"),
            format!("backbone.stem.norm.{part}"),
        ));
        maps.push(mapping(
            format!("{foreign_root}head.norm.{part}"),
            format!("backbone.head.norm.{part}"),
        ));
    }
    for (i, &depth) in CONVNEXT_DEPTHS.iter().enumerate() {
        if i > 0 {
            for part in AFFINE_PARTS {
                maps.push(mapping(
                    format!("{foreign_root}stages.{i}.downsample.0.{part}"),
                    format!("backbone.downsample{i}.norm.{part}"),
                ));
                maps.push(mapping(
                    format!("{foreign_root}stages.{i}.downsample.1.{part}"),
                    format!("backbone.downsample{i}.conv.{part}"),
                ));
            }
        }
        for j in 0..depth {
            let f = format!("{foreign_root}stages.{i}.blocks.{j}");
            let c = format!("backbone.stages.{i}.{j}");
            for part in AFFINE_PARTS {
                maps.push(mapping(format!("{f}.conv_dw.{part}"), format!("{c}.dwconv.{part}")));
                maps.push(mapping(format!("{f}.norm.{part}"), format!("{c}.norm.{part}")));
                maps.push(mapping(format!("{f}.mlp.fc1.{part}"), format!("{c}.pwconv1.{part}")));
                maps.push(mapping(format!("{f}.mlp.fc2.{part}"), format!("{c}.pwconv2.{part}")));
            }
            maps.push(mapping(format!("{f}.gamma"), format!("{c}.gamma")));
        }
    }
    if with_proj {
        for part in AFFINE_PARTS {
            maps.push(mapping(
                format!("visual.head.proj.{part}"),
                format!("backbone.head.proj.{part}"),
            ));
        }
    }
    maps
}

fn mappings_for(arch: Architecture, variant: Variant, scheme: Scheme) -> Result<Vec<Mapping>> {
    let compatible = matches!(
        (arch, variant, scheme),
        (Architecture::Resnet50, Variant::Clip, Scheme::ClipResnet)
            | (Architecture::Resnet50, Variant::Imagenet, Scheme::TorchvisionResnet)
            | (Architecture::VitB32, Variant::Clip, Scheme::ClipVit)
            | (Architecture::VitB32, Variant::Imagenet, Scheme::TorchvisionVit)
            | (Architecture::ConvnextBase, Variant::Clip, Scheme::OpenClipConvnext)
            | (Architecture::ConvnextBase, Variant::Imagenet, Scheme::TimmConvnext)
    );
    if !compatible {
        return Err(Error::CorruptWeights {
            path: Default::default(),
            reason: format!(
                "artifact naming scheme {scheme:?} does not match {}/{:?}",
                arch.name(),
                variant
            ),
        });
    }
    Ok(match scheme {
        Scheme::ClipResnet => clip_resnet_mappings(),
        Scheme::TorchvisionResnet => torchvision_resnet_mappings(),
        Scheme::ClipVit => clip_vit_mappings(),
        Scheme::TorchvisionVit => torchvision_vit_mappings(),
        Scheme::OpenClipConvnext => convnext_mappings("visual.trunk.", true),
        Scheme::TimmConvnext => convnext_mappings("", false),
        Scheme::Canonical => Vec::new(),
    })
}

/// Foreign keys that are legitimately dropped (text towers, classifier
/// heads, counters) rather than mapped.
fn is_skippable(scheme: Scheme, key: &str) -> bool {
    if key.ends_with("num_batches_tracked") {
        return true;
    }
    match scheme {
        Scheme::ClipResnet | Scheme::ClipVit | Scheme::OpenClipConvnext => {
            // anything outside the vision tower, plus trunk extras that
            // carry no parameters in this structure
            !key.starts_with("visual.") || key.starts_with("visual.trunk.norm_pre")
        }
        Scheme::TorchvisionResnet => key.starts_with("fc."),
        Scheme::TorchvisionVit => key.starts_with("heads."),
        Scheme::TimmConvnext => key.starts_with("head.fc.") || key.starts_with("norm_pre"),
        Scheme::Canonical => false,
    }
}

fn apply_transform(t: &Tensor, transform: &Transform) -> Result<Tensor> {
    Ok(match transform {
        Transform::None => t.clone(),
        Transform::Transpose => t.t()?.contiguous()?,
        Transform::Reshape(shape) => t.reshape(shape.clone())?,
    })
}

/// Translate a raw state dict into the canonical `backbone.*` names.
pub fn translate_state_dict(
    raw: &BTreeMap<String, Tensor>,
    arch: Architecture,
    variant: Variant,
) -> Result<BTreeMap<String, Tensor>> {
    let keys: Vec<&str> = raw.keys().map(|s| s.as_str()).collect();
    let scheme = detect_scheme(&keys)?;
    if scheme == Scheme::Canonical {
        return Ok(raw
            .iter()
            .filter(|(k, _)| k.starts_with("backbone."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect());
    }
    let maps = mappings_for(arch, variant, scheme)?;
    let mut out = BTreeMap::new();
    let mut consumed: std::collections::BTreeSet<&str> = Default::default();
    for m in &maps {
        if let Some(t) = raw.get(&m.foreign) {
            out.insert(m.canonical.clone(), apply_transform(t, &m.transform)?);
            consumed.insert(m.foreign.as_str());
        }
    }
    for key in keys {
        if !consumed.contains(key) && !is_skippable(scheme, key) {
            return Err(Error::CorruptWeights {
                path: Default::default(),
                reason: format!("unexpected tensor {key:?} for {}/{:?}", arch.name(), variant),
            });
        }
    }
    Ok(out)
}

/// Load and translate a pretrained artifact from disk.
pub fn load_pretrained(
    path: &Path,
    arch: Architecture,
    variant: Variant,
) -> Result<BTreeMap<String, Tensor>> {
    let raw: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::CorruptWeights {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_iter()
        .collect();
    translate_state_dict(&raw, arch, variant).map_err(|e| match e {
        Error::CorruptWeights { reason, .. } => Error::CorruptWeights {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}
