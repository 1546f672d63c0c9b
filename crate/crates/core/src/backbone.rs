//! Small convolutional pyramid producing four feature maps at strides
//! 4, 8, 16 and 32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Initializer, ParamSet, Real, Tensor, Var};

/// Output strides of the four pyramid levels relative to the input.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone channels must be positive, got {:?}",
                self.channels
            )));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "backbone channels must be non-decreasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Convolutions of stage `s` as `(cin, cout, stride)`.
    fn stage_convs(&self, s: usize) -> Vec<(usize, usize, usize)> {
        let c = self.channels[s];
        let mut convs = if s == 0 {
            vec![(3, c, 2), (c, c, 2)]
        } else {
            vec![(self.channels[s - 1], c, 2)]
        };
        convs.extend((0..self.blocks_per_stage).map(|_| (c, c, 1)));
        convs
    }
}

/// The four multi-scale feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<L> {
    pub levels: [L; 4],
}

impl FeaturePyramid<Var> {
    pub fn materialize<T: Real>(&self, g: &Graph<T>) -> FeaturePyramid<Tensor<T>> {
        FeaturePyramid {
            levels: self.levels.map(|v| g.value(v).clone()),
        }
    }
}

fn conv_name(stage: usize, idx: usize) -> String {
    format!("backbone.stage{stage}.conv{idx}")
}

/// Deterministic He-uniform initialization; biases start at zero.
pub fn init_backbone<T: Real>(cfg: &BackboneConfig) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut init = Initializer::new(cfg.seed, &mut params);
    for s in 0..4 {
        for (j, (cin, cout, _)) in cfg.stage_convs(s).into_iter().enumerate() {
            let name = conv_name(s, j);
            init.he_uniform(&format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9)?;
            init.zeros(&format!("{name}.bias"), &[cout])?;
        }
    }
    Ok(params)
}

/// Closed-form parameter count of [`init_backbone`].
pub fn parameter_count(cfg: &BackboneConfig) -> usize {
    (0..4)
        .flat_map(|s| cfg.stage_convs(s))
        .map(|(cin, cout, _)| cout * cin * 9 + cout)
        .sum()
}

/// Rejects inputs whose spatial size is not a multiple of 32.
pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::shape(
            "backbone",
            format!("input {h}x{w} is not divisible by 32"),
        ));
    }
    Ok(())
}

/// Runs the pyramid on `images: B×3×H×W`.
pub fn forward_pyramid<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &BackboneConfig,
    images: Var,
) -> Result<FeaturePyramid<Var>> {
    let shape = g.shape(images).to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::shape("backbone", format!("input {shape:?}")));
    };
    if c != 3 {
        return Err(Error::shape("backbone", format!("expected 3 channels, got {c}")));
    }
    check_resolution(h, w)?;
    let mut x = images;
    let mut levels = Vec::with_capacity(4);
    for s in 0..4 {
        for (j, (_, _, stride)) in cfg.stage_convs(s).into_iter().enumerate() {
            let name = conv_name(s, j);
            let wv = g.param(params, &format!("{name}.weight"))?;
            let bv = g.param(params, &format!("{name}.bias"))?;
            x = g.conv2d(x, wv, bv, stride, 1)?;
            x = g.activation(x, Activation::Gelu)?;
        }
        levels.push(x);
    }
    Ok(FeaturePyramid {
        levels: levels.try_into().expect("four stages"),
    })
}
