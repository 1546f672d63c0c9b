//! End-to-end network: backbone → fusion → decoder → head, plus the
//! per-pixel classifier baseline used for comparisons.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, FeaturePyramid};
use crate::decoder::{self, DecoderConfig, Inspector};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionMode};
use crate::head::{self, HeadConfig};
use crate::numerics::{Graph, Initializer, ParamSet, Real, Tensor, Var};
use crate::rng::hash_words;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Class-token decoder with token-conditioned mask head.
    #[default]
    Segface,
    /// Pointwise classifier on the fused map, bilinearly upsampled.
    PixelBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub fusion: FusionMode,
    pub embed_dim: usize,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Segface,
            fusion: FusionMode::MultiScale,
            embed_dim: 256,
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.arch == Arch::Segface {
            self.decoder.validate(self.embed_dim)?;
        }
        Ok(())
    }
}

/// Initializes every parameter of the configured model.
pub fn init_model<T: Real>(cfg: &ModelConfig, num_classes: usize) -> Result<ParamSet<T>> {
    cfg.validate()?;
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let seed = cfg.backbone.seed;
    let sub = |k: u64| hash_words(&[seed, k]);
    let d = cfg.embed_dim;
    let mut params = backbone::init_backbone(&cfg.backbone)?;
    params.extend(fusion::init_fusion(&cfg.backbone.channels, d, cfg.fusion, sub(1))?)?;
    match cfg.arch {
        Arch::Segface => {
            params.extend(decoder::init_decoder(&cfg.decoder, num_classes, d, sub(2))?)?;
            params.extend(head::init_head(&cfg.head, d, sub(3))?)?;
        }
        Arch::PixelBaseline => {
            let mut extra = ParamSet::new();
            let mut init = Initializer::new(sub(4), &mut extra);
            init.he_uniform("baseline.classifier.weight", &[num_classes, d, 1, 1], d)?;
            init.zeros("baseline.classifier.bias", &[num_classes])?;
            params.extend(extra)?;
        }
    }
    Ok(params)
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub pyramid: FeaturePyramid<Var>,
    pub fused: Var,
    /// Refined class tokens (absent for the baseline).
    pub tokens: Option<Var>,
}

/// Number of classes a parameter set was built for.
pub fn num_classes<T: Real>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<usize> {
    Ok(match cfg.arch {
        Arch::Segface => params.value("decoder.tokens")?.shape()[0],
        Arch::PixelBaseline => params.value("baseline.classifier.bias")?.shape()[0],
    })
}

/// Forward pass on `images: B×3×H×W` producing logits `B×N×H×W`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    images: Var,
    inspector: Option<&mut Inspector<T>>,
) -> Result<ForwardOutput> {
    let shape = g.shape(images).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("model", format!("images {shape:?}")));
    }
    backbone::check_resolution(shape[2], shape[3])?;
    let pyramid = backbone::forward_pyramid(g, params, &cfg.backbone, images)?;
    let fused = fusion::run_fusion(g, params, &pyramid, cfg.fusion)?;
    let (logits, tokens) = match cfg.arch {
        Arch::Segface => {
            let out = decoder::run_decoder(g, params, &cfg.decoder, fused, inspector)?;
            let u = head::upscale(g, params, out.face)?;
            (head::predict_masks(g, params, u, out.tokens)?, Some(out.tokens))
        }
        Arch::PixelBaseline => {
            let w = g.param(params, "baseline.classifier.weight")?;
            let b = g.param(params, "baseline.classifier.bias")?;
            let low = g.conv2d(fused, w, b, 1, 0)?;
            (g.bilinear_resize(low, shape[2], shape[3])?, None)
        }
    };
    Ok(ForwardOutput {
        logits,
        pyramid,
        fused,
        tokens,
    })
}

/// Convenience inference: logits for a batch without keeping the graph.
pub fn predict_logits<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = forward(&mut g, params, cfg, x, None)?;
    Ok(g.value(out.logits).clone())
}
