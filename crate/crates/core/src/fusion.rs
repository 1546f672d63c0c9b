//! Multi-scale fusion: per-level pointwise projections to a shared width,
//! bilinear upsampling to the finest level, concatenation and a final
//! pointwise convolution.

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Initializer, ParamSet, Real, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// All four levels are projected, upsampled and merged.
    #[default]
    MultiScale,
    /// Only the coarsest level is used (ablation).
    Bypass,
}

pub fn init_fusion<T: Real>(
    channels: &[usize; 4],
    dim: usize,
    mode: FusionMode,
    seed: u64,
) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    let mut init = Initializer::new(seed, &mut params);
    match mode {
        FusionMode::MultiScale => {
            for (i, &c) in channels.iter().enumerate() {
                init.he_uniform(&format!("fusion.level{i}.weight"), &[dim, c, 1, 1], c)?;
                init.zeros(&format!("fusion.level{i}.bias"), &[dim])?;
            }
            init.he_uniform("fusion.out.weight", &[dim, 4 * dim, 1, 1], 4 * dim)?;
            init.zeros("fusion.out.bias", &[dim])?;
        }
        FusionMode::Bypass => {
            init.he_uniform("fusion.bypass.weight", &[dim, channels[3], 1, 1], channels[3])?;
            init.zeros("fusion.bypass.bias", &[dim])?;
        }
    }
    Ok(params)
}

fn pointwise<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    if g.shape(w)[1] != g.shape(x)[1] {
        return Err(Error::shape(
            "fusion",
            format!(
                "{prefix} expects {} channels, level has {}",
                g.shape(w)[1],
                g.shape(x)[1]
            ),
        ));
    }
    g.conv2d(x, w, b, 1, 0)
}

fn finest_size<T: Real>(g: &Graph<T>, pyramid: &FeaturePyramid<Var>) -> (usize, usize) {
    let s = g.shape(pyramid.levels[0]);
    (s[2], s[3])
}

/// Fused face-token map `B×D×H₁×W₁`.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    pyramid: &FeaturePyramid<Var>,
) -> Result<Var> {
    let (h1, w1) = finest_size(g, pyramid);
    let mut upsampled = Vec::with_capacity(4);
    for (i, &level) in pyramid.levels.iter().enumerate() {
        let p = pointwise(g, params, &format!("fusion.level{i}"), level)?;
        let s = g.shape(p);
        upsampled.push(if (s[2], s[3]) == (h1, w1) {
            p
        } else {
            g.bilinear_resize(p, h1, w1)?
        });
    }
    let cat = g.concat_channels(&upsampled)?;
    pointwise(g, params, "fusion.out", cat)
}

/// Single-scale variant: projects the coarsest level and upsamples it.
pub fn bypass_fuse<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    pyramid: &FeaturePyramid<Var>,
) -> Result<Var> {
    let (h1, w1) = finest_size(g, pyramid);
    let p = pointwise(g, params, "fusion.bypass", pyramid.levels[3])?;
    g.bilinear_resize(p, h1, w1)
}

pub fn run_fusion<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    pyramid: &FeaturePyramid<Var>,
    mode: FusionMode,
) -> Result<Var> {
    match mode {
        FusionMode::MultiScale => fuse(g, params, pyramid),
        FusionMode::Bypass => bypass_fuse(g, params, pyramid),
    }
}
