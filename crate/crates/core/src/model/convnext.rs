//! ConvNeXt-base backbone: 4x4 patchify stem, four stages of depthwise-7x7
//! blocks with inverted-bottleneck MLPs, layer scale, and layer norms
//! throughout (eps 1e-6). The canonical variant appends the 512-d projection
//! used by the contrastive checkpoints; the `Imagenet` variant exposes the
//! pooled 1024-d features directly.

use candle_core::Tensor;

use super::init::Init;
use super::layers::{Act, Conv2d, LayerNorm, LayerSpec, Linear, ParamBuilder, ParamKind};
use super::Variant;
use crate::error::Result;

const DEPTHS: [usize; 4] = [3, 3, 27, 3];
const DIMS: [usize; 4] = [128, 256, 512, 1024];
const EMBED_DIM: usize = 512;
const LN_EPS: f64 = 1e-6;

struct Block {
    dwconv: Conv2d,
    norm: LayerNorm,
    pwconv1: Linear,
    pwconv2: Linear,
    gamma: Tensor,
    dim: usize,
}

impl Block {
    fn new(b: &mut ParamBuilder, prefix: &str, dim: usize) -> Result<Self> {
        let dwconv = Conv2d::new(b, &format!("{prefix}.dwconv"), dim, dim, 7, 1, 3, dim, true)?;
        let mut norm = LayerNorm::new(b, &format!("{prefix}.norm"), dim)?;
        norm.eps = LN_EPS;
        let pwconv1 = Linear::new(
            b,
            &format!("{prefix}.pwconv1"),
            dim,
            4 * dim,
            true,
            Init::TruncNormal { std: 0.02 },
        )?;
        let pwconv2 = Linear::new(
            b,
            &format!("{prefix}.pwconv2"),
            4 * dim,
            dim,
            true,
            Init::TruncNormal { std: 0.02 },
        )?;
        let gamma = b.param(
            &format!("{prefix}.gamma"),
            &[dim],
            ParamKind::Weight,
            Init::Const(1e-6),
        )?;
        Ok(Self {
            dwconv,
            norm,
            pwconv1,
            pwconv2,
            gamma,
            dim,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dwconv.forward(x)?;
        // channels-last for the norm + MLP, back to NCHW for the residual
        let y = y.permute((0, 2, 3, 1))?.contiguous()?;
        let y = self.norm.forward(&y)?;
        let y = self.pwconv1.forward(&y)?;
        let y = Act::Gelu.forward(&y)?;
        let y = self.pwconv2.forward(&y)?;
        let y = y.broadcast_mul(&self.gamma)?;
        let y = y.permute((0, 3, 1, 2))?.contiguous()?;
        Ok((x + y)?)
    }
}

struct Downsample {
    norm: LayerNorm,
    conv: Conv2d,
}

pub struct ConvNextBase {
    stem_conv: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<Vec<Block>>,
    downsamples: Vec<Downsample>,
    head_norm: LayerNorm,
    proj: Option<Linear>,
    pub variant: Variant,
}

impl ConvNextBase {
    pub fn new(b: &mut ParamBuilder, prefix: &str, variant: Variant) -> Result<Self> {
        let stem_conv = Conv2d::new(b, &format!("{prefix}.stem.conv"), 3, DIMS[0], 4, 4, 0, 1, true)?;
        let mut stem_norm = LayerNorm::new(b, &format!("{prefix}.stem.norm"), DIMS[0])?;
        stem_norm.eps = LN_EPS;

        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for (i, (&depth, &dim)) in DEPTHS.iter().zip(&DIMS).enumerate() {
            if i > 0 {
                let mut norm = LayerNorm::new(b, &format!("{prefix}.downsample{i}.norm"), DIMS[i - 1])?;
                norm.eps = LN_EPS;
                let conv = Conv2d::new(
                    b,
                    &format!("{prefix}.downsample{i}.conv"),
                    DIMS[i - 1],
                    dim,
                    2,
                    2,
                    0,
                    1,
                    true,
                )?;
                downsamples.push(Downsample { norm, conv });
            }
            let stage = (0..depth)
                .map(|j| Block::new(b, &format!("{prefix}.stages.{i}.{j}"), dim))
                .collect::<Result<Vec<_>>>()?;
            stages.push(stage);
        }

        let mut head_norm = LayerNorm::new(b, &format!("{prefix}.head.norm"), DIMS[3])?;
        head_norm.eps = LN_EPS;
        let proj = if variant == Variant::Clip {
            Some(Linear::new(
                b,
                &format!("{prefix}.head.proj"),
                DIMS[3],
                EMBED_DIM,
                true,
                Init::TruncNormal { std: 0.02 },
            )?)
        } else {
            None
        };
        Ok(Self {
            stem_conv,
            stem_norm,
            stages,
            downsamples,
            head_norm,
            proj,
            variant,
        })
    }

    pub fn feature_dim(&self) -> usize {
        if self.proj.is_some() {
            EMBED_DIM
        } else {
            DIMS[3]
        }
    }

    /// Final-stage activation before pooling: (B, 1024, S/32, S/32).
    pub fn trunk(&self, x: &Tensor, _training: bool) -> Result<Tensor> {
        let mut out = self
            .stem_norm
            .forward_channels_first(&self.stem_conv.forward(x)?)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let ds = &self.downsamples[i - 1];
                out = ds.conv.forward(&ds.norm.forward_channels_first(&out)?)?;
            }
            for block in stage {
                out = block.forward(&out)?;
            }
        }
        Ok(out)
    }

    /// Global average pool, head norm, optional contrastive projection.
    pub fn tail(&self, a: &Tensor) -> Result<Tensor> {
        let pooled = a.mean(3)?.mean(2)?;
        let pooled = self.head_norm.forward(&pooled)?;
        match &self.proj {
            Some(p) => p.forward(&pooled),
            None => Ok(pooled),
        }
    }

    pub fn layer_specs(&self, input_side: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut hw = input_side / 4;
        specs.push(self.stem_conv.spec("stem.conv", hw, hw));
        specs.push(LayerSpec::Norm {
            name: "stem.norm".into(),
            elems: DIMS[0] * hw * hw,
        });
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let ds = &self.downsamples[i - 1];
                specs.push(LayerSpec::Norm {
                    name: format!("downsample{i}.norm"),
                    elems: DIMS[i - 1] * hw * hw,
                });
                hw /= 2;
                specs.push(ds.conv.spec(&format!("downsample{i}.conv"), hw, hw));
            }
            for (j, block) in stage.iter().enumerate() {
                let p = format!("stages.{i}.{j}");
                specs.push(block.dwconv.spec(&format!("{p}.dwconv"), hw, hw));
                specs.push(LayerSpec::Norm {
                    name: format!("{p}.norm"),
                    elems: block.dim * hw * hw,
                });
                specs.push(LayerSpec::Linear {
                    name: format!("{p}.pwconv1"),
                    in_f: block.dim,
                    out_f: 4 * block.dim,
                    tokens: hw * hw,
                    bias: true,
                });
                specs.push(LayerSpec::Activation {
                    name: format!("{p}.gelu"),
                    elems: 4 * block.dim * hw * hw,
                });
                specs.push(LayerSpec::Linear {
                    name: format!("{p}.pwconv2"),
                    in_f: 4 * block.dim,
                    out_f: block.dim,
                    tokens: hw * hw,
                    bias: true,
                });
            }
        }
        specs.push(LayerSpec::Pool {
            name: "gap".into(),
            elems: DIMS[3] * hw * hw,
        });
        specs.push(LayerSpec::Norm {
            name: "head.norm".into(),
            elems: DIMS[3],
        });
        if self.proj.is_some() {
            specs.push(LayerSpec::Linear {
                name: "head.proj".into(),
                in_f: DIMS[3],
                out_f: EMBED_DIM,
                tokens: 1,
                bias: true,
            });
        }
        specs
    }
}
