//! Parameter registry and the layer primitives shared by all backbones.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a canonical dotted
//! name. Trainable entries are candle `Var`s (the optimizer mutates their
//! storage in place; layer-held clones observe the update), frozen entries
//! are plain tensors so no autograd graph is built through them.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use super::init::{init_tensor, Init};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrices/kernels and embeddings; subject to weight decay.
    Weight,
    Bias,
    /// Normalization affine parameters; never decayed.
    Norm,
    /// Non-learnable state (batch-norm running stats); saved but not counted.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub var: Option<Var>,
    pub kind: ParamKind,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Trainable vars with their decay eligibility.
    pub fn trainable(&self) -> Vec<(String, Var, ParamKind)> {
        self.entries
            .iter()
            .filter_map(|(name, e)| e.var.clone().map(|v| (name.clone(), v, e.kind)))
            .filter(|(_, _, kind)| *kind != ParamKind::Buffer)
            .collect()
    }

    /// (total, trainable) counts over learnable parameters; buffers excluded.
    pub fn counts(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        for e in self.entries.values() {
            if e.kind == ParamKind::Buffer {
                continue;
            }
            let n = e.tensor.elem_count();
            total += n;
            if e.var.is_some() {
                trainable += n;
            }
        }
        (total, trainable)
    }

    /// Current values of every entry, buffers included (for checkpoints).
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(name, e)| (name.clone(), e.tensor.clone()))
            .collect()
    }
}

/// Creates parameters, pulling from a preloaded name->tensor map when one is
/// supplied (pretrained weights or a checkpoint) and falling back to the
/// given initializer otherwise.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    preloaded: Option<&'a BTreeMap<String, Tensor>>,
    used: BTreeSet<String>,
    missing: Vec<String>,
    trainable: bool,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
        trainable: bool,
        preloaded: Option<&'a BTreeMap<String, Tensor>>,
    ) -> Self {
        Self {
            store,
            preloaded,
            used: BTreeSet::new(),
            missing: Vec::new(),
            trainable,
            rng,
        }
    }

    fn materialize(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(pre) = self.preloaded {
            if let Some(t) = pre.get(name) {
                if t.dims() != shape {
                    return Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        got: t.dims().to_vec(),
                        expected: shape.to_vec(),
                    });
                }
                self.used.insert(name.to_string());
                return Ok(t.to_dtype(DType::F32)?.to_device(&Device::Cpu)?);
            }
            self.missing.push(name.to_string());
        }
        init_tensor(self.rng, shape, init)
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
    ) -> Result<Tensor> {
        let value = self.materialize(name, shape, init)?;
        let (tensor, var) = if self.trainable {
            let var = Var::from_tensor(&value)?;
            (var.as_tensor().clone(), Some(var))
        } else {
            (value, None)
        };
        self.store.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor: tensor.clone(),
                var,
                kind,
            },
        );
        Ok(tensor)
    }

    /// Mutable-but-untrained state; always Var-backed so it can be updated
    /// in place (batch-norm running stats).
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let value = self.materialize(name, shape, init)?;
        let var = Var::from_tensor(&value)?;
        self.store.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor: var.as_tensor().clone(),
                var: Some(var.clone()),
                kind: ParamKind::Buffer,
            },
        );
        Ok(var)
    }

    /// When strict, every preloaded tensor must have been consumed and every
    /// requested name must have been found.
    pub fn finish(self, strict: bool) -> Result<()> {
        if !strict {
            return Ok(());
        }
        if let Some(pre) = self.preloaded {
            if !self.missing.is_empty() {
                return Err(Error::CorruptWeights {
                    path: Default::default(),
                    reason: format!(
                        "missing {} tensors, first: {}",
                        self.missing.len(),
                        self.missing[0]
                    ),
                });
            }
            let leftover: Vec<&String> =
                pre.keys().filter(|k| !self.used.contains(*k)).collect();
            if !leftover.is_empty() {
                return Err(Error::CorruptWeights {
                    path: Default::default(),
                    reason: format!(
                        "{} unconsumed tensors, first: {}",
                        leftover.len(),
                        leftover[0]
                    ),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// shape inventory for the FLOP profiler
// ---------------------------------------------------------------------------

/// Shape-level description of one computational layer. The profiler sums
/// multiply-accumulates over these; anything it does not recognize must fail
/// loudly rather than silently count as zero.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        groups: usize,
        out_h: usize,
        out_w: usize,
        bias: bool,
    },
    Linear {
        name: String,
        in_f: usize,
        out_f: usize,
        tokens: usize,
        bias: bool,
    },
    /// The two T x T matmuls of scaled dot-product attention.
    AttentionMatmul {
        name: String,
        tokens: usize,
        dim: usize,
    },
    Norm {
        name: String,
        elems: usize,
    },
    Activation {
        name: String,
        elems: usize,
    },
    Pool {
        name: String,
        elems: usize,
    },
    /// Escape hatch for layers without a registered counter.
    Custom {
        name: String,
        kind: String,
    },
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    /// Exact (erf) GELU.
    Gelu,
    /// x * sigmoid(1.702 x); the CLIP transformer activation.
    QuickGelu,
}

impl Act {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Relu => x.relu()?,
            Act::Gelu => x.gelu_erf()?,
            Act::QuickGelu => {
                let gate = candle_nn::ops::sigmoid(&(x * 1.702)?)?;
                (x * gate)?
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.param(
            &format!("{prefix}.weight"),
            &[out_c, in_c / groups, kernel, kernel],
            ParamKind::Weight,
            Init::KaimingNormalFanOut,
        )?;
        let bias = if bias {
            Some(b.param(
                &format!("{prefix}.bias"),
                &[out_c],
                ParamKind::Bias,
                Init::Zeros,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
            in_c,
            out_c,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, self.out_c, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn out_hw(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(in_h), f(in_w))
    }

    pub fn spec(&self, name: &str, out_h: usize, out_w: usize) -> LayerSpec {
        LayerSpec::Conv {
            name: name.to_string(),
            in_c: self.in_c,
            out_c: self.out_c,
            kernel: self.kernel,
            groups: self.groups,
            out_h,
            out_w,
            bias: self.bias.is_some(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = b.param(
            &format!("{prefix}.weight"),
            &[out_f, in_f],
            ParamKind::Weight,
            init,
        )?;
        let bias = if bias {
            Some(b.param(
                &format!("{prefix}.bias"),
                &[out_f],
                ParamKind::Bias,
                Init::Zeros,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_f,
            out_f,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        // flatten leading dims into one gemm; much faster than a broadcast
        // matmul on the CPU backend
        let y = if x.rank() == 2 {
            x.matmul(&w)?
        } else {
            let dims = x.dims().to_vec();
            let rows: usize = dims[..dims.len() - 1].iter().product();
            let flat = x.contiguous()?.reshape((rows, self.in_f))?;
            let mut out_dims = dims;
            *out_dims.last_mut().expect("rank >= 1") = self.out_f;
            flat.matmul(&w)?.reshape(out_dims)?
        };
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(bias)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    running_mean: Var,
    running_var: Var,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder, prefix: &str, channels: usize) -> Result<Self> {
        let weight = b.param(
            &format!("{prefix}.weight"),
            &[channels],
            ParamKind::Norm,
            Init::Ones,
        )?;
        let bias = b.param(
            &format!("{prefix}.bias"),
            &[channels],
            ParamKind::Norm,
            Init::Zeros,
        )?;
        let running_mean = b.buffer(&format!("{prefix}.running_mean"), &[channels], Init::Zeros)?;
        let running_var = b.buffer(&format!("{prefix}.running_var"), &[channels], Init::Ones)?;
        Ok(Self {
            weight,
            bias,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let c = self.channels;
        let (mean, var) = if training {
            let n = (x.elem_count() / c) as f64;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            // running stats use the unbiased variance, like everyone else
            let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - self.momentum))?
                + (mean.detach().flatten_all()? * self.momentum)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - self.momentum))?
                + (unbiased * self.momentum)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let inv_std = ((var + self.eps)?.sqrt()?.recip())?;
        let normed = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let scaled = normed.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?;
        Ok(scaled.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, prefix: &str, dim: usize) -> Result<Self> {
        let weight = b.param(
            &format!("{prefix}.weight"),
            &[dim],
            ParamKind::Norm,
            Init::Ones,
        )?;
        let bias = b.param(
            &format!("{prefix}.bias"),
            &[dim],
            ParamKind::Norm,
            Init::Zeros,
        )?;
        Ok(Self {
            weight,
            bias,
            dim,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }

    /// Apply over the channel dim of an NCHW tensor (permute, norm, permute).
    pub fn forward_channels_first(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.permute((0, 2, 3, 1))?.contiguous()?;
        let y = self.forward(&y)?;
        Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Standard multi-head self-attention with a fused qkv projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        let std = (dim as f64).powf(-0.5);
        let qkv = Linear::new(
            b,
            &format!("{prefix}.qkv"),
            dim,
            3 * dim,
            true,
            Init::Normal { std },
        )?;
        let out = Linear::new(
            b,
            &format!("{prefix}.out"),
            dim,
            dim,
            true,
            Init::Normal { std },
        )?;
        Ok(Self {
            qkv,
            out,
            heads,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.heads;
        let hd = d / h;
        let qkv = self.qkv.forward(x)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?;
        let split = |t_: Tensor| -> Result<Tensor> {
            Ok(t_
                .reshape((b, t, h, hd))?
                .permute((0, 2, 1, 3))?
                .contiguous()?)
        };
        let q = split(q)?;
        let k = split(k)?;
        let v = split(v)?;
        let scale = (hd as f64).powf(-0.5);
        let attn = (q.matmul(&k.transpose(2, 3)?)? * scale)?;
        let attn = candle_nn::ops::softmax_last_dim(&attn)?;
        let ctx = attn.matmul(&v)?;
        let ctx = ctx.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(&ctx)
    }
}

/// CLIP's attention pooling head: tokens = [mean, spatial...], positional
/// embedding, full self-attention, output projection of token 0.
#[derive(Debug, Clone)]
pub struct AttentionPool2d {
    pub pos_embed: Tensor,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub out_dim: usize,
    pub grid: usize,
}

impl AttentionPool2d {
    pub fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        grid: usize,
        dim: usize,
        heads: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let std = (dim as f64).powf(-0.5);
        let pos_embed = b.param(
            &format!("{prefix}.pos_embed"),
            &[grid * grid + 1, dim],
            ParamKind::Weight,
            Init::Normal { std },
        )?;
        let mk = |b: &mut ParamBuilder, n: &str, out: usize| {
            Linear::new(b, &format!("{prefix}.{n}"), dim, out, true, Init::Normal { std })
        };
        let q = mk(b, "q", dim)?;
        let k = mk(b, "k", dim)?;
        let v = mk(b, "v", dim)?;
        let out = mk(b, "out", out_dim)?;
        Ok(Self {
            pos_embed,
            q,
            k,
            v,
            out,
            heads,
            dim,
            out_dim,
            grid,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let tokens = x.reshape((bsz, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let mean = tokens.mean_keepdim(1)?;
        let tokens = Tensor::cat(&[&mean, &tokens], 1)?;
        let pos = self.positional(h, w)?;
        let tokens = tokens.broadcast_add(&pos.unsqueeze(0)?)?;

        let t = h * w + 1;
        let heads = self.heads;
        let hd = self.dim / heads;
        let split = |t_: Tensor| -> Result<Tensor> {
            Ok(t_
                .reshape((bsz, t, heads, hd))?
                .permute((0, 2, 1, 3))?
                .contiguous()?)
        };
        let q = split(self.q.forward(&tokens)?)?;
        let k = split(self.k.forward(&tokens)?)?;
        let v = split(self.v.forward(&tokens)?)?;
        let scale = (hd as f64).powf(-0.5);
        let attn = (q.matmul(&k.transpose(2, 3)?)? * scale)?;
        let attn = candle_nn::ops::softmax_last_dim(&attn)?;
        let ctx = attn.matmul(&v)?;
        let ctx = ctx
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((bsz, t, self.dim))?;
        let pooled = ctx.narrow(1, 0, 1)?.squeeze(1)?;
        self.out.forward(&pooled)
    }

    /// Positional embedding for an h x w grid, bilinearly resized from the
    /// native grid when the input resolution differs.
    fn positional(&self, h: usize, w: usize) -> Result<Tensor> {
        if h == self.grid && w == self.grid {
            return Ok(self.pos_embed.clone());
        }
        let data = self.pos_embed.flatten_all()?.to_vec1::<f32>()?;
        let d = self.dim;
        let cls = &data[0..d];
        let grid_part = &data[d..];
        let resized = bilinear_resize_tokens(grid_part, self.grid, self.grid, d, h, w);
        let mut out = Vec::with_capacity((h * w + 1) * d);
        out.extend_from_slice(cls);
        out.extend_from_slice(&resized);
        Ok(Tensor::from_vec(out, (h * w + 1, d), &Device::Cpu)?)
    }
}

/// Bilinear resize of a token grid laid out as (h0*w0, d) row-major.
/// Half-pixel centers (no corner alignment), matching the image resizes.
pub fn bilinear_resize_tokens(
    src: &[f32],
    h0: usize,
    w0: usize,
    d: usize,
    h1: usize,
    w1: usize,
) -> Vec<f32> {
    let mut out = vec![0f32; h1 * w1 * d];
    for y in 0..h1 {
        let sy = ((y as f32 + 0.5) * h0 as f32 / h1 as f32 - 0.5).clamp(0.0, (h0 - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h0 - 1);
        let fy = sy - y0 as f32;
        for x in 0..w1 {
            let sx = ((x as f32 + 0.5) * w0 as f32 / w1 as f32 - 0.5).clamp(0.0, (w0 - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w0 - 1);
            let fx = sx - x0 as f32;
            for c in 0..d {
                let v00 = src[(y0 * w0 + x0) * d + c];
                let v01 = src[(y0 * w0 + x1) * d + c];
                let v10 = src[(y1 * w0 + x0) * d + c];
                let v11 = src[(y1 * w0 + x1) * d + c];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(y * w1 + x) * d + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Seeded dropout: Bernoulli(1 - rate) mask scaled by 1/(1 - rate).
pub fn dropout_seeded(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate == 0.0 {
        return Ok(x.clone());
    }
    use rand::Rng;
    let keep = 1.0 - rate;
    let n = x.elem_count();
    let mask: Vec<f32> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                (1.0 / keep) as f32
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
    Ok((x * mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn builder_env() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn counts_track_trainability() {
        let (mut store, mut rng) = builder_env();
        {
            let mut b = ParamBuilder::new(&mut store, &mut rng, true, None);
            Linear::new(&mut b, "head", 8, 2, true, Init::Normal { std: 0.01 }).unwrap();
            b.finish(false).unwrap();
        }
        let (total, trainable) = store.counts();
        assert_eq!(total, 8 * 2 + 2);
        assert_eq!(trainable, total);

        let (mut store, mut rng) = builder_env();
        {
            let mut b = ParamBuilder::new(&mut store, &mut rng, false, None);
            Linear::new(&mut b, "frozen", 8, 2, true, Init::Normal { std: 0.01 }).unwrap();
            b.finish(false).unwrap();
        }
        assert_eq!(store.counts(), (18, 0));
    }

    #[test]
    fn preloaded_shape_mismatch_and_leftovers() {
        let (mut store, mut rng) = builder_env();
        let mut pre = BTreeMap::new();
        pre.insert(
            "lin.weight".to_string(),
            Tensor::zeros(&[3, 3][..], DType::F32, &Device::Cpu).unwrap(),
        );
        let mut b = ParamBuilder::new(&mut store, &mut rng, true, Some(&pre));
        let err = Linear::new(&mut b, "lin", 8, 3, false, Init::Zeros);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));

        let (mut store, mut rng) = builder_env();
        let mut pre = BTreeMap::new();
        pre.insert(
            "unused.weight".to_string(),
            Tensor::zeros(&[1][..], DType::F32, &Device::Cpu).unwrap(),
        );
        let b = ParamBuilder::new(&mut store, &mut rng, true, Some(&pre));
        assert!(matches!(
            b.finish(true),
            Err(Error::CorruptWeights { .. })
        ));
    }

    #[test]
    fn batchnorm_eval_is_affine_identity_at_init() {
        let (mut store, mut rng) = builder_env();
        let bn = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, true, None);
            let bn = BatchNorm2d::new(&mut b, "bn", 4).unwrap();
            b.finish(false).unwrap();
            bn
        };
        let x = Tensor::from_vec(
            (0..4 * 4 * 2 * 2).map(|i| i as f32 / 100.0).collect::<Vec<_>>(),
            (4, 4, 2, 2),
            &Device::Cpu,
        )
        .unwrap();
        // running stats start at mean 0 / var 1, weight 1 / bias 0
        let y = bn.forward(&x, false).unwrap();
        let xd = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yd = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in xd.iter().zip(&yd) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let (mut store, mut rng) = builder_env();
        let bn = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, true, None);
            BatchNorm2d::new(&mut b, "bn", 2).unwrap()
        };
        let x = Tensor::randn(3f32, 2f32, (8, 2, 4, 4), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(mean.abs() < 1e-4, "batch-normalized mean was {mean}");
        // running mean moved toward the batch mean
        let rm = bn
            .running_mean
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(rm.iter().any(|v| v.abs() > 0.05));
    }

    #[test]
    fn layernorm_matches_manual() {
        let (mut store, mut rng) = builder_env();
        let ln = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, true, None);
            LayerNorm::new(&mut b, "ln", 3).unwrap()
        };
        let x = Tensor::from_vec(vec![1f32, 2.0, 3.0], (1, 3), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let var: f32 = 2.0 / 3.0;
        let expected: Vec<f32> = [-1.0f32, 0.0, 1.0]
            .iter()
            .map(|v| v / (var + 1e-5).sqrt())
            .collect();
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_shapes_and_determinism() {
        let (mut store, mut rng) = builder_env();
        let mha = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, true, None);
            MultiHeadAttention::new(&mut b, "attn", 16, 4).unwrap()
        };
        let x = Tensor::randn(0f32, 1f32, (2, 5, 16), &Device::Cpu).unwrap();
        let a = mha.forward(&x).unwrap();
        assert_eq!(a.dims(), &[2, 5, 16]);
        let b2 = mha.forward(&x).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = b2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(av, bv);
    }

    #[test]
    fn attention_pool_handles_non_native_grid() {
        let (mut store, mut rng) = builder_env();
        let pool = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, true, None);
            AttentionPool2d::new(&mut b, "pool", 7, 32, 4, 16).unwrap()
        };
        for grid in [7usize, 2, 9] {
            let x = Tensor::randn(0f32, 1f32, (1, 32, grid, grid), &Device::Cpu).unwrap();
            let y = pool.forward(&x).unwrap();
            assert_eq!(y.dims(), &[1, 16]);
        }
    }

    #[test]
    fn dropout_scales_and_zeroes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::ones((1, 1000), DType::F32, &Device::Cpu).unwrap();
        let y = dropout_seeded(&x, 0.5, &mut rng).unwrap();
        let vals = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let zeros = vals.iter().filter(|v| **v == 0.0).count();
        let twos = vals.iter().filter(|v| (**v - 2.0).abs() < 1e-6).count();
        assert_eq!(zeros + twos, 1000);
        assert!(zeros > 400 && zeros < 600);
    }
}
