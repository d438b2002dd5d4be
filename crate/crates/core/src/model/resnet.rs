//! ResNet-50 backbones.
//!
//! The canonical variant mirrors the CLIP image encoder: a three-conv stem
//! with a trailing average pool, bottlenecks that downsample with an average
//! pool after the 3x3 conv, and an attention-pooling head projecting to the
//! 1024-d embedding. The `Imagenet` variant is the classic layout: 7x7 stem,
//! strided 3x3 convs, global average pooling over 2048 channels.

use candle_core::Tensor;

use super::layers::{
    AttentionPool2d, BatchNorm2d, Conv2d, LayerSpec, ParamBuilder,
};
use super::Variant;
use crate::error::Result;

const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_PLANES: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    stride: usize,
    clip_style: bool,
}

impl Bottleneck {
    fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        in_c: usize,
        planes: usize,
        stride: usize,
        clip_style: bool,
    ) -> Result<Self> {
        let out_c = planes * EXPANSION;
        // CLIP keeps every conv stride-1 and pools instead; the classic
        // layout strides the 3x3 conv.
        let conv2_stride = if clip_style { 1 } else { stride };
        let conv1 = Conv2d::new(b, &format!("{prefix}.conv1"), in_c, planes, 1, 1, 0, 1, false)?;
        let bn1 = BatchNorm2d::new(b, &format!("{prefix}.bn1"), planes)?;
        let conv2 = Conv2d::new(
            b,
            &format!("{prefix}.conv2"),
            planes,
            planes,
            3,
            conv2_stride,
            1,
            1,
            false,
        )?;
        let bn2 = BatchNorm2d::new(b, &format!("{prefix}.bn2"), planes)?;
        let conv3 = Conv2d::new(b, &format!("{prefix}.conv3"), planes, out_c, 1, 1, 0, 1, false)?;
        let bn3 = BatchNorm2d::new(b, &format!("{prefix}.bn3"), out_c)?;
        let downsample = if stride != 1 || in_c != out_c {
            let ds_stride = if clip_style { 1 } else { stride };
            let conv = Conv2d::new(
                b,
                &format!("{prefix}.downsample.conv"),
                in_c,
                out_c,
                1,
                ds_stride,
                0,
                1,
                false,
            )?;
            let bn = BatchNorm2d::new(b, &format!("{prefix}.downsample.bn"), out_c)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
            stride,
            clip_style,
        })
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut out = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu()?;
        out = self.bn2.forward(&self.conv2.forward(&out)?, training)?.relu()?;
        if self.clip_style && self.stride > 1 {
            out = out.avg_pool2d(self.stride)?;
        }
        out = self.bn3.forward(&self.conv3.forward(&out)?, training)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => {
                let mut id = x.clone();
                if self.clip_style && self.stride > 1 {
                    id = id.avg_pool2d(self.stride)?;
                }
                bn.forward(&conv.forward(&id)?, training)?
            }
            None => x.clone(),
        };
        Ok((out + identity)?.relu()?)
    }
}

enum Stem {
    /// conv3x3 s2 -> conv3x3 -> conv3x3 -> avgpool(2)
    Clip {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        conv3: Conv2d,
        bn3: BatchNorm2d,
    },
    /// conv7x7 s2 -> maxpool3 s2
    Classic { conv1: Conv2d, bn1: BatchNorm2d },
}

pub struct ResNet50 {
    stem: Stem,
    stages: Vec<Vec<Bottleneck>>,
    attnpool: Option<AttentionPool2d>,
    pub variant: Variant,
}

impl ResNet50 {
    pub fn new(b: &mut ParamBuilder, prefix: &str, variant: Variant) -> Result<Self> {
        let clip_style = variant == Variant::Clip;
        let stem = if clip_style {
            Stem::Clip {
                conv1: Conv2d::new(b, &format!("{prefix}.stem.conv1"), 3, 32, 3, 2, 1, 1, false)?,
                bn1: BatchNorm2d::new(b, &format!("{prefix}.stem.bn1"), 32)?,
                conv2: Conv2d::new(b, &format!("{prefix}.stem.conv2"), 32, 32, 3, 1, 1, 1, false)?,
                bn2: BatchNorm2d::new(b, &format!("{prefix}.stem.bn2"), 32)?,
                conv3: Conv2d::new(b, &format!("{prefix}.stem.conv3"), 32, 64, 3, 1, 1, 1, false)?,
                bn3: BatchNorm2d::new(b, &format!("{prefix}.stem.bn3"), 64)?,
            }
        } else {
            Stem::Classic {
                conv1: Conv2d::new(b, &format!("{prefix}.stem.conv1"), 3, 64, 7, 2, 3, 1, false)?,
                bn1: BatchNorm2d::new(b, &format!("{prefix}.stem.bn1"), 64)?,
            }
        };
        let mut stages = Vec::new();
        let mut in_c = 64;
        for (i, (&blocks, &planes)) in STAGE_BLOCKS.iter().zip(&STAGE_PLANES).enumerate() {
            let mut stage = Vec::new();
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(
                    b,
                    &format!("{prefix}.layer{}.{j}", i + 1),
                    in_c,
                    planes,
                    stride,
                    clip_style,
                )?);
                in_c = planes * EXPANSION;
            }
            stages.push(stage);
        }
        let attnpool = if clip_style {
            Some(AttentionPool2d::new(
                b,
                &format!("{prefix}.attnpool"),
                7,
                2048,
                32,
                1024,
            )?)
        } else {
            None
        };
        Ok(Self {
            stem,
            stages,
            attnpool,
            variant,
        })
    }

    pub fn feature_dim(&self) -> usize {
        if self.attnpool.is_some() {
            1024
        } else {
            2048
        }
    }

    /// Everything up to the final residual stage: (B, 2048, S/32, S/32).
    /// This is also the GradCAM target activation.
    pub fn trunk(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut out = match &self.stem {
            Stem::Clip {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
            } => {
                let mut y = bn1.forward(&conv1.forward(x)?, training)?.relu()?;
                y = bn2.forward(&conv2.forward(&y)?, training)?.relu()?;
                y = bn3.forward(&conv3.forward(&y)?, training)?.relu()?;
                y.avg_pool2d(2)?
            }
            Stem::Classic { conv1, bn1 } => {
                let y = bn1.forward(&conv1.forward(x)?, training)?.relu()?;
                // zero padding is safe here: inputs are post-ReLU
                let y = y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                y.max_pool2d_with_stride(3, 2)?
            }
        };
        for stage in &self.stages {
            for block in stage {
                out = block.forward(&out, training)?;
            }
        }
        Ok(out)
    }

    /// Pool the trunk activation into the feature embedding.
    pub fn tail(&self, a: &Tensor) -> Result<Tensor> {
        match &self.attnpool {
            Some(pool) => pool.forward(a),
            None => Ok(a.mean(3)?.mean(2)?),
        }
    }

    pub fn layer_specs(&self, input_side: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut hw = input_side;
        match &self.stem {
            Stem::Clip {
                conv1,
                conv2,
                conv3,
                ..
            } => {
                hw /= 2;
                specs.push(conv1.spec("stem.conv1", hw, hw));
                specs.push(conv2.spec("stem.conv2", hw, hw));
                specs.push(conv3.spec("stem.conv3", hw, hw));
                specs.push(LayerSpec::Norm {
                    name: "stem.bn".into(),
                    elems: (32 + 32 + 64) * hw * hw,
                });
                hw /= 2;
                specs.push(LayerSpec::Pool {
                    name: "stem.avgpool".into(),
                    elems: 64 * hw * hw,
                });
            }
            Stem::Classic { conv1, .. } => {
                hw /= 2;
                specs.push(conv1.spec("stem.conv1", hw, hw));
                specs.push(LayerSpec::Norm {
                    name: "stem.bn".into(),
                    elems: 64 * hw * hw,
                });
                hw /= 2;
                specs.push(LayerSpec::Pool {
                    name: "stem.maxpool".into(),
                    elems: 64 * hw * hw,
                });
            }
        }
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                let name = format!("layer{}.{j}", i + 1);
                let in_hw = hw;
                if block.stride > 1 {
                    hw /= 2;
                }
                // CLIP runs the 3x3 at input resolution and pools after;
                // classic strides the 3x3 itself.
                let conv2_hw = if block.clip_style { in_hw } else { hw };
                specs.push(block.conv1.spec(&format!("{name}.conv1"), in_hw, in_hw));
                specs.push(block.conv2.spec(&format!("{name}.conv2"), conv2_hw, conv2_hw));
                specs.push(block.conv3.spec(&format!("{name}.conv3"), hw, hw));
                if let Some((conv, _)) = &block.downsample {
                    specs.push(conv.spec(&format!("{name}.downsample"), hw, hw));
                }
                specs.push(LayerSpec::Activation {
                    name: format!("{name}.relu"),
                    elems: block.conv3.out_c * hw * hw,
                });
            }
        }
        if let Some(pool) = &self.attnpool {
            let tokens = hw * hw + 1;
            let dim = pool.dim;
            for n in ["q", "k", "v"] {
                specs.push(LayerSpec::Linear {
                    name: format!("attnpool.{n}"),
                    in_f: dim,
                    out_f: dim,
                    tokens,
                    bias: true,
                });
            }
            specs.push(LayerSpec::AttentionMatmul {
                name: "attnpool.attn".into(),
                tokens,
                dim,
            });
            // the output projection only runs on the pooled token
            specs.push(LayerSpec::Linear {
                name: "attnpool.out".into(),
                in_f: dim,
                out_f: pool.out_dim,
                tokens: 1,
                bias: true,
            });
        } else {
            specs.push(LayerSpec::Pool {
                name: "gap".into(),
                elems: 2048 * hw * hw,
            });
        }
        specs
    }
}
