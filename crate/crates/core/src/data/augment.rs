//! Random affine augmentation about the image center.

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objective::LabelMask;
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation range in degrees.
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    /// Translation range in pixels, applied independently per axis.
    pub translation: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rotation: [-30.0, 30.0],
            scale: [0.5, 3.0],
            translation: [-20.0, 20.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.rotation) || !ordered(self.translation) || !ordered(self.scale) || self.scale[0] <= 0.0 {
            return Err(Error::Config(format!("invalid augmentation ranges: {self:?}")));
        }
        Ok(())
    }
}

/// One affine warp: rotate by `rotation` degrees and scale by `scale` about
/// the center, then translate by `(tx, ty)` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub rotation: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Warp {
    pub const IDENTITY: Warp = Warp {
        rotation: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
}

/// Resamples by inverse mapping: bilinear for the image, nearest-neighbor for
/// the mask. Pixels mapped from outside the frame become black / background.
pub fn warp(sample: &Sample, w: &Warp) -> Result<Sample> {
    let (h, wd) = (sample.height(), sample.width());
    let (cx, cy) = ((wd as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = w.rotation.to_radians().sin_cos();
    let src = sample.image.data();
    let mut pixels = vec![0f32; 3 * h * wd];
    let mut ids = vec![0u8; h * wd];
    let fetch = |ch: usize, x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= wd as isize || y >= h as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * wd + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..wd {
            let (u, v) = (x as f64 - cx - w.tx, y as f64 - cy - w.ty);
            // Inverse rotation, then inverse scale.
            let sx = (cos * u + sin * v) / w.scale + cx;
            let sy = (-sin * u + cos * v) / w.scale + cy;

            let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && nx < wd as f64 && ny < h as f64 {
                ids[y * wd + x] = sample.mask.ids()[ny as usize * wd + nx as usize];
            }

            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..3 {
                let top = fetch(ch, x0, y0) + fx * (fetch(ch, x0 + 1, y0) - fetch(ch, x0, y0));
                let bottom = fetch(ch, x0, y0 + 1) + fx * (fetch(ch, x0 + 1, y0 + 1) - fetch(ch, x0, y0 + 1));
                pixels[(ch * h + y) * wd + x] = (top + fy * (bottom - top)) as f32;
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(&[3, h, wd], pixels)?,
        mask: LabelMask::new(1, h, wd, ids)?,
    })
}

/// Draws a warp uniformly from the configured ranges and applies it; returns
/// the sample unchanged when augmentation is disabled.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut SplitMix64) -> Result<Sample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    cfg.validate()?;
    let w = Warp {
        rotation: rng.uniform(cfg.rotation[0], cfg.rotation[1]),
        scale: rng.uniform(cfg.scale[0], cfg.scale[1]),
        tx: rng.uniform(cfg.translation[0], cfg.translation[1]),
        ty: rng.uniform(cfg.translation[0], cfg.translation[1]),
    };
    warp(sample, &w)
}
