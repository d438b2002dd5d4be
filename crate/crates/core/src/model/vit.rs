//! ViT-B/32 backbone.
//!
//! The canonical variant is the CLIP vision tower: 32x32 patch conv without
//! bias, pre-transformer layer norm, QuickGELU in the MLPs, and a final
//! projection of the class token to the 512-d embedding. The `Imagenet`
//! variant drops the pre-norm and projection (768-d features, exact GELU),
//! matching the usual supervised checkpoints.

use candle_core::{Device, Tensor};

use super::layers::{
    bilinear_resize_tokens, Act, Conv2d, LayerNorm, LayerSpec, Linear, MultiHeadAttention,
    ParamBuilder, ParamKind,
};
use super::init::Init;
use super::Variant;
use crate::error::{Error, Result};

pub const PATCH: usize = 32;
const WIDTH: usize = 768;
const LAYERS: usize = 12;
const HEADS: usize = 12;
const MLP_RATIO: usize = 4;
const NATIVE_GRID: usize = 7;
const EMBED_DIM: usize = 512;

struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    act: Act,
}

impl Block {
    fn new(b: &mut ParamBuilder, prefix: &str, act: Act) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{prefix}.ln1"), WIDTH)?,
            attn: MultiHeadAttention::new(b, &format!("{prefix}.attn"), WIDTH, HEADS)?,
            ln2: LayerNorm::new(b, &format!("{prefix}.ln2"), WIDTH)?,
            fc1: Linear::new(
                b,
                &format!("{prefix}.mlp.fc1"),
                WIDTH,
                WIDTH * MLP_RATIO,
                true,
                Init::TruncNormal { std: 0.02 },
            )?,
            fc2: Linear::new(
                b,
                &format!("{prefix}.mlp.fc2"),
                WIDTH * MLP_RATIO,
                WIDTH,
                true,
                Init::TruncNormal { std: 0.02 },
            )?,
            act,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let mlp = self
            .fc2
            .forward(&self.act.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        Ok((x + mlp)?)
    }
}

pub struct VitB32 {
    patch: Conv2d,
    class_token: Tensor,
    pos_embed: Tensor,
    ln_pre: Option<LayerNorm>,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Option<Linear>,
    pub variant: Variant,
}

impl VitB32 {
    pub fn new(b: &mut ParamBuilder, prefix: &str, variant: Variant) -> Result<Self> {
        let clip_style = variant == Variant::Clip;
        let patch = Conv2d::new(
            b,
            &format!("{prefix}.patch"),
            3,
            WIDTH,
            PATCH,
            PATCH,
            0,
            1,
            !clip_style,
        )?;
        let scale = (WIDTH as f64).powf(-0.5);
        let class_token = b.param(
            &format!("{prefix}.class_token"),
            &[WIDTH],
            ParamKind::Weight,
            Init::Normal { std: scale },
        )?;
        let pos_embed = b.param(
            &format!("{prefix}.pos_embed"),
            &[NATIVE_GRID * NATIVE_GRID + 1, WIDTH],
            ParamKind::Weight,
            Init::Normal { std: scale },
        )?;
        let ln_pre = if clip_style {
            Some(LayerNorm::new(b, &format!("{prefix}.ln_pre"), WIDTH)?)
        } else {
            None
        };
        let act = if clip_style { Act::QuickGelu } else { Act::Gelu };
        let blocks = (0..LAYERS)
            .map(|i| Block::new(b, &format!("{prefix}.blocks.{i}"), act))
            .collect::<Result<Vec<_>>>()?;
        let ln_post = LayerNorm::new(b, &format!("{prefix}.ln_post"), WIDTH)?;
        let proj = if clip_style {
            Some(Linear::new(
                b,
                &format!("{prefix}.proj"),
                WIDTH,
                EMBED_DIM,
                false,
                Init::Normal { std: scale },
            )?)
        } else {
            None
        };
        Ok(Self {
            patch,
            class_token,
            pos_embed,
            ln_pre,
            blocks,
            ln_post,
            proj,
            variant,
        })
    }

    pub fn feature_dim(&self) -> usize {
        if self.proj.is_some() {
            EMBED_DIM
        } else {
            WIDTH
        }
    }

    fn check_input(&self, side: usize) -> Result<usize> {
        if side % PATCH != 0 || side == 0 {
            return Err(Error::InvalidConfig(format!(
                "ViT-b32 input side must be a positive multiple of {PATCH}, got {side}"
            )));
        }
        Ok(side / PATCH)
    }

    fn positional(&self, grid: usize) -> Result<Tensor> {
        if grid == NATIVE_GRID {
            return Ok(self.pos_embed.clone());
        }
        let data = self.pos_embed.flatten_all()?.to_vec1::<f32>()?;
        let cls = &data[0..WIDTH];
        let rest = &data[WIDTH..];
        let resized =
            bilinear_resize_tokens(rest, NATIVE_GRID, NATIVE_GRID, WIDTH, grid, grid);
        let mut out = Vec::with_capacity((grid * grid + 1) * WIDTH);
        out.extend_from_slice(cls);
        out.extend_from_slice(&resized);
        Ok(Tensor::from_vec(
            out,
            (grid * grid + 1, WIDTH),
            &Device::Cpu,
        )?)
    }

    /// Token embeddings after the final encoder block: (B, 1 + g*g, 768).
    /// The patch tokens (class token excluded) are the GradCAM target.
    pub fn trunk(&self, x: &Tensor, _training: bool) -> Result<Tensor> {
        let (bsz, _c, h, w) = x.dims4()?;
        if h != w {
            return Err(Error::InvalidConfig(format!(
                "ViT-b32 expects square inputs, got {h}x{w}"
            )));
        }
        let grid = self.check_input(h)?;
        let patches = self.patch.forward(x)?; // (B, 768, g, g)
        let tokens = patches
            .reshape((bsz, WIDTH, grid * grid))?
            .transpose(1, 2)?
            .contiguous()?;
        let cls = self
            .class_token
            .reshape((1, 1, WIDTH))?
            .broadcast_as((bsz, 1, WIDTH))?
            .contiguous()?;
        let mut out = Tensor::cat(&[&cls, &tokens], 1)?;
        out = out.broadcast_add(&self.positional(grid)?.unsqueeze(0)?)?;
        if let Some(ln) = &self.ln_pre {
            out = ln.forward(&out)?;
        }
        for block in &self.blocks {
            out = block.forward(&out)?;
        }
        Ok(out)
    }

    /// Class-token embedding: layer norm, then the CLIP projection if any.
    pub fn tail(&self, tokens: &Tensor) -> Result<Tensor> {
        let cls = tokens.narrow(1, 0, 1)?.squeeze(1)?;
        let cls = self.ln_post.forward(&cls)?;
        match &self.proj {
            Some(p) => p.forward(&cls),
            None => Ok(cls),
        }
    }

    /// Reshape (B, 1+N, D) token output into a (B, D, g, g) activation grid,
    /// dropping the class token.
    pub fn tokens_to_grid(&self, tokens: &Tensor) -> Result<Tensor> {
        let (bsz, t, d) = tokens.dims3()?;
        let n = t - 1;
        let grid = (n as f64).sqrt().round() as usize;
        debug_assert_eq!(grid * grid, n);
        Ok(tokens
            .narrow(1, 1, n)?
            .transpose(1, 2)?
            .reshape((bsz, d, grid, grid))?
            .contiguous()?)
    }

    pub fn layer_specs(&self, input_side: usize) -> Vec<LayerSpec> {
        let grid = input_side / PATCH;
        let tokens = grid * grid + 1;
        let mut specs = Vec::new();
        specs.push(self.patch.spec("patch", grid, grid));
        for i in 0..LAYERS {
            let p = format!("blocks.{i}");
            specs.push(LayerSpec::Norm {
                name: format!("{p}.ln1"),
                elems: tokens * WIDTH,
            });
            specs.push(LayerSpec::Linear {
                name: format!("{p}.attn.qkv"),
                in_f: WIDTH,
                out_f: 3 * WIDTH,
                tokens,
                bias: true,
            });
            specs.push(LayerSpec::AttentionMatmul {
                name: format!("{p}.attn"),
                tokens,
                dim: WIDTH,
            });
            specs.push(LayerSpec::Linear {
                name: format!("{p}.attn.out"),
                in_f: WIDTH,
                out_f: WIDTH,
                tokens,
                bias: true,
            });
            specs.push(LayerSpec::Norm {
                name: format!("{p}.ln2"),
                elems: tokens * WIDTH,
            });
            specs.push(LayerSpec::Linear {
                name: format!("{p}.mlp.fc1"),
                in_f: WIDTH,
                out_f: WIDTH * MLP_RATIO,
                tokens,
                bias: true,
            });
            specs.push(LayerSpec::Activation {
                name: format!("{p}.mlp.act"),
                elems: tokens * WIDTH * MLP_RATIO,
            });
            specs.push(LayerSpec::Linear {
                name: format!("{p}.mlp.fc2"),
                in_f: WIDTH * MLP_RATIO,
                out_f: WIDTH,
                tokens,
                bias: true,
            });
        }
        specs.push(LayerSpec::Norm {
            name: "ln_post".into(),
            elems: WIDTH,
        });
        if self.proj.is_some() {
            specs.push(LayerSpec::Linear {
                name: "proj".into(),
                in_f: WIDTH,
                out_f: EMBED_DIM,
                tokens: 1,
                bias: false,
            });
        }
        specs
    }
}
