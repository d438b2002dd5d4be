//! Deepfake detectors: a vision backbone feeding a dropout + linear head
//! that emits two logits (index 0 = real, index 1 = fake).
//!
//! The canonical backbone structures follow the contrastively-pretrained
//! image encoders (that is what the published parameter/FLOP table profiles),
//! so `random` and `clip` initialization share a structure; `imagenet`
//! switches to the classic supervised layout for that architecture and any
//! parameter-count difference is surfaced by the profiler rather than hidden.

pub mod checkpoint;
mod convnext;
mod init;
pub mod layers;
mod resnet;
mod vit;
pub mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{NormSource, NormalizationStats};
use convnext::ConvNextBase;
use init::Init;
use layers::{dropout_seeded, LayerSpec, Linear, ParamBuilder, ParamKind, ParamStore};
use resnet::ResNet50;
use vit::VitB32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet50,
    VitB32,
    ConvnextBase,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::Resnet50,
        Architecture::VitB32,
        Architecture::ConvnextBase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Resnet50 => "resnet50",
            Architecture::VitB32 => "vit_b32",
            Architecture::ConvnextBase => "convnext_base",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet50" => Some(Architecture::Resnet50),
            "vit_b32" => Some(Architecture::VitB32),
            "convnext_base" => Some(Architecture::ConvnextBase),
            _ => None,
        }
    }

    /// All three backbones reduce the input by 32x, and ViT requires the
    /// side to be an exact multiple of its patch size.
    pub fn input_multiple(self) -> usize {
        32
    }

    /// The resolution the published profile numbers refer to.
    pub fn native_input_side(self) -> usize {
        224
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Imagenet,
    Clip,
}

impl InitMode {
    pub const ALL: [InitMode; 3] = [InitMode::Random, InitMode::Imagenet, InitMode::Clip];

    pub fn name(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::Imagenet => "imagenet",
            InitMode::Clip => "clip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" | "none" => Some(InitMode::Random),
            "imagenet" => Some(InitMode::Imagenet),
            "clip" => Some(InitMode::Clip),
            _ => None,
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural flavor of a backbone (independent of where weights come from).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Clip,
    Imagenet,
}

impl Variant {
    pub fn for_init(init: InitMode) -> Self {
        match init {
            InitMode::Imagenet => Variant::Imagenet,
            _ => Variant::Clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub arch: Architecture,
    pub init: InitMode,
    pub freeze_backbone: bool,
    pub dropout_rate: f64,
}

impl DetectorConfig {
    pub fn new(arch: Architecture, init: InitMode) -> Self {
        Self {
            arch,
            init,
            freeze_backbone: false,
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

pub enum Backbone {
    Resnet(ResNet50),
    Vit(VitB32),
    Convnext(ConvNextBase),
}

impl Backbone {
    fn feature_dim(&self) -> usize {
        match self {
            Backbone::Resnet(m) => m.feature_dim(),
            Backbone::Vit(m) => m.feature_dim(),
            Backbone::Convnext(m) => m.feature_dim(),
        }
    }

    fn trunk(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            Backbone::Resnet(m) => m.trunk(x, training),
            Backbone::Vit(m) => m.trunk(x, training),
            Backbone::Convnext(m) => m.trunk(x, training),
        }
    }

    fn tail(&self, a: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Resnet(m) => m.tail(a),
            Backbone::Vit(m) => m.tail(a),
            Backbone::Convnext(m) => m.tail(a),
        }
    }

    /// View a trunk activation as (B, K, h, w) feature maps for GradCAM.
    fn activation_grid(&self, a: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Resnet(_) | Backbone::Convnext(_) => Ok(a.clone()),
            Backbone::Vit(m) => m.tokens_to_grid(a),
        }
    }

    fn layer_specs(&self, input_side: usize) -> Vec<LayerSpec> {
        match self {
            Backbone::Resnet(m) => m.layer_specs(input_side),
            Backbone::Vit(m) => m.layer_specs(input_side),
            Backbone::Convnext(m) => m.layer_specs(input_side),
        }
    }
}

pub struct Head {
    pub linear: Linear,
    pub dropout_rate: f64,
}

impl Head {
    fn new(b: &mut ParamBuilder, feature_dim: usize, dropout_rate: f64) -> Result<Self> {
        let linear = Linear::new(
            b,
            "head.linear",
            feature_dim,
            2,
            true,
            Init::Normal { std: 0.01 },
        )?;
        Ok(Self {
            linear,
            dropout_rate,
        })
    }

    fn forward(&self, features: &Tensor, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let x = match dropout_rng {
            Some(rng) => dropout_seeded(features, self.dropout_rate, rng)?,
            None => features.clone(),
        };
        self.linear.forward(&x)
    }
}

/// Where pretrained weight artifacts live. Defaults to `DFKIT_WEIGHTS_DIR`.
#[derive(Debug, Clone, Default)]
pub struct WeightsSource {
    pub dir: Option<PathBuf>,
}

pub const WEIGHTS_DIR_ENV: &str = "DFKIT_WEIGHTS_DIR";

impl WeightsSource {
    pub fn from_env() -> Self {
        Self {
            dir: std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from),
        }
    }

    pub fn locate(&self, arch: Architecture, init: InitMode) -> Result<PathBuf> {
        let dir = self.dir.clone().ok_or_else(|| Error::WeightsNotFound {
            arch: arch.name().into(),
            init: init.name().into(),
            dir: PathBuf::from(format!("${WEIGHTS_DIR_ENV} (unset)")),
        })?;
        let file = dir.join(format!("{}_{}.safetensors", arch.name(), init.name()));
        if !file.exists() {
            return Err(Error::WeightsNotFound {
                arch: arch.name().into(),
                init: init.name().into(),
                dir,
            });
        }
        Ok(file)
    }
}

pub struct Detector {
    pub config: DetectorConfig,
    backbone: Backbone,
    head: Head,
    store: ParamStore,
    feature_dim: usize,
}

/// Dropout needs a random source, so training mode carries one.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

/// Fixed seeds: detector construction is deterministic per config.
const BACKBONE_SEED: u64 = 0x0df0_b0ce;
const HEAD_SEED: u64 = 0x0df0_4ead;

pub fn build_detector(config: &DetectorConfig) -> Result<Detector> {
    build_detector_with(config, &WeightsSource::from_env())
}

pub fn build_detector_with(config: &DetectorConfig, source: &WeightsSource) -> Result<Detector> {
    let preloaded = match config.init {
        InitMode::Random => None,
        _ => {
            let path = source.locate(config.arch, config.init)?;
            Some(weights::load_pretrained(&path, config.arch, Variant::for_init(config.init))?)
        }
    };
    Detector::assemble(config, preloaded.as_ref(), None)
}

impl Detector {
    /// Build the structure, pulling backbone weights (and optionally head
    /// weights, for checkpoint restores) from `preloaded`.
    fn assemble(
        config: &DetectorConfig,
        backbone_weights: Option<&BTreeMap<String, Tensor>>,
        head_weights: Option<&BTreeMap<String, Tensor>>,
    ) -> Result<Detector> {
        config.validate()?;
        let variant = Variant::for_init(config.init);
        let mut store = ParamStore::new();

        let mut rng = ChaCha8Rng::seed_from_u64(BACKBONE_SEED);
        let backbone = {
            let mut b = ParamBuilder::new(
                &mut store,
                &mut rng,
                !config.freeze_backbone,
                backbone_weights,
            );
            let backbone = match config.arch {
                Architecture::Resnet50 => Backbone::Resnet(ResNet50::new(&mut b, "backbone", variant)?),
                Architecture::VitB32 => Backbone::Vit(VitB32::new(&mut b, "backbone", variant)?),
                Architecture::ConvnextBase => {
                    Backbone::Convnext(ConvNextBase::new(&mut b, "backbone", variant)?)
                }
            };
            b.finish(backbone_weights.is_some())?;
            backbone
        };

        let feature_dim = backbone.feature_dim();
        let mut head_rng = ChaCha8Rng::seed_from_u64(HEAD_SEED);
        let head = {
            let mut b = ParamBuilder::new(&mut store, &mut head_rng, true, head_weights);
            let head = Head::new(&mut b, feature_dim, config.dropout_rate)?;
            b.finish(head_weights.is_some())?;
            head
        };

        Ok(Detector {
            config: *config,
            backbone,
            head,
            store,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// The normalization the preprocessing must apply for this detector.
    pub fn normalization(&self) -> NormalizationStats {
        match self.config.init {
            InitMode::Clip => NormalizationStats::clip(),
            _ => NormalizationStats::imagenet(),
        }
    }

    pub fn norm_source(&self) -> NormSource {
        self.normalization().source
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let (_, c, h, w) = batch.dims4()?;
        let m = self.config.arch.input_multiple();
        if c != 3 || h != w || h == 0 || h % m != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch must be (N, 3, S, S) with S a positive multiple of {m}, got {:?}",
                batch.dims()
            )));
        }
        Ok(h)
    }

    /// Backbone features for a batch. In frozen mode the batch-norm layers
    /// stay in inference statistics even while training the head.
    pub fn features(&self, batch: &Tensor, training: bool) -> Result<Tensor> {
        self.check_batch(batch)?;
        let trunk_training = training && !self.config.freeze_backbone;
        let a = self.backbone.trunk(batch, trunk_training)?;
        self.backbone.tail(&a)
    }

    /// Logits (N, 2). Dropout is active only in training mode.
    pub fn forward(&self, batch: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        match mode {
            ForwardMode::Eval => {
                let features = self.features(batch, false)?;
                self.head.forward(&features, None)
            }
            ForwardMode::Train { dropout_rng } => {
                let features = self.features(batch, true)?;
                let features = if self.config.freeze_backbone {
                    features.detach()
                } else {
                    features
                };
                self.head.forward(&features, Some(dropout_rng))
            }
        }
    }

    /// Head logits from precomputed features (head-only training fast path).
    pub fn head_forward(
        &self,
        features: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        self.head.forward(features, dropout_rng)
    }

    /// Per-image fake probability: softmax over the two logits, class 1.
    pub fn predict_scores(&self, batch: &Tensor) -> Result<Vec<f32>> {
        let logits = self.forward(batch, ForwardMode::Eval)?;
        scores_from_logits(&logits)
    }

    /// (total, trainable) learnable parameter counts.
    pub fn parameter_counts(&self) -> (usize, usize) {
        self.store.counts()
    }

    pub fn trainable_params(&self) -> Vec<(String, Var, ParamKind)> {
        self.store.trainable()
    }

    pub fn param_store(&self) -> &ParamStore {
        &self.store
    }

    /// Forward pass split at the GradCAM target layer. The activation is
    /// re-rooted as a `Var` so the logit gradient with respect to it can be
    /// read back after `backward()`.
    pub fn cam_forward(&self, batch: &Tensor) -> Result<CamTrace> {
        self.check_batch(batch)?;
        let activation = self.backbone.trunk(batch, false)?.detach();
        let var = Var::from_tensor(&activation)?;
        let features = self.backbone.tail(var.as_tensor())?;
        let logits = self.head.forward(&features, None)?;
        Ok(CamTrace {
            var,
            logits,
        })
    }

    /// Shared view logic for CAM activations and their gradients.
    pub fn activation_grid(&self, a: &Tensor) -> Result<Tensor> {
        self.backbone.activation_grid(a)
    }

    /// Shape inventory for the profiler, head included.
    pub fn layer_specs(&self, input_side: usize) -> Vec<LayerSpec> {
        let mut specs = self.backbone.layer_specs(input_side);
        specs.push(LayerSpec::Linear {
            name: "head.linear".into(),
            in_f: self.feature_dim,
            out_f: 2,
            tokens: 1,
            bias: true,
        });
        specs
    }
}

/// GradCAM plumbing returned by [`Detector::cam_forward`].
pub struct CamTrace {
    /// Grad target: the trunk activation re-rooted as a leaf.
    pub var: Var,
    pub logits: Tensor,
}

pub fn scores_from_logits(logits: &Tensor) -> Result<Vec<f32>> {
    let probs = candle_nn::ops::softmax_last_dim(logits)?;
    let fake = probs.narrow(1, 1, 1)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(fake)
}
