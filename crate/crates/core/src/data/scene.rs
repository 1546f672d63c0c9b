//! Procedural face scenes. Geometry is defined on a 64-pixel canvas and
//! scaled to the requested resolution.

use super::{ClassInfo, Sample, SceneSpec};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::objective::LabelMask;
use crate::rng::{hash_words, unit_f64, SplitMix64};

/// Class names the renderer can draw, in paint order (later occludes earlier).
pub const SHAPES: [&str; 10] = [
    "hair", "skin", "left_eye", "right_eye", "nose", "mouth", "necklace", "earring", "glasses",
    "hat",
];

const PRESENCE_TAG: u64 = 0x7072_6573;
const GEOMETRY_TAG: u64 = 0x6765_6f6d;
const COLOR_TAG: u64 = 0x636f_6c72;
const NOISE_TAG: u64 = 0x6e6f_6973;

const TEXTURE_AMPLITUDE: f64 = 0.06;
const NOISE_AMPLITUDE: f64 = 0.05;
const COLOR_JITTER: f64 = 0.06;

fn base_color(name: &str) -> [f64; 3] {
    match name {
        "skin" => [0.87, 0.67, 0.55],
        "hair" => [0.25, 0.15, 0.08],
        "left_eye" | "right_eye" => [0.10, 0.20, 0.50],
        "nose" => [0.78, 0.50, 0.42],
        "mouth" => [0.75, 0.20, 0.25],
        "glasses" => [0.10, 0.10, 0.10],
        "earring" => [0.95, 0.80, 0.20],
        "necklace" => [0.85, 0.85, 0.92],
        "hat" => [0.30, 0.40, 0.75],
        _ => [0.5, 0.5, 0.5],
    }
}

/// Whether scene `index` contains `class`; a pure function of
/// `(seed, index, class id)`.
pub fn class_present(spec: &SceneSpec, index: u64, class: &ClassInfo) -> bool {
    class.p >= 1.0
        || unit_f64(hash_words(&[spec.seed, index, class.id as u64, PRESENCE_TAG])) < class.p
}

/// Face layout on the 64-pixel canvas.
struct Face {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

/// Whether canvas point `(x, y)` is covered by the shape `name`.
fn covers(name: &str, f: &Face, x: f64, y: f64) -> bool {
    let eye_y = f.cy - 0.15 * f.b;
    match name {
        "hair" => {
            in_ellipse(x, y, f.cx, f.cy - 0.15 * f.b, 1.15 * f.a, 1.08 * f.b)
                && y < f.cy - 0.1 * f.b
        }
        "skin" => in_ellipse(x, y, f.cx, f.cy, f.a, f.b),
        "left_eye" => in_ellipse(x, y, f.cx - 0.42 * f.a, eye_y, 0.22 * f.a, 0.11 * f.b),
        "right_eye" => in_ellipse(x, y, f.cx + 0.42 * f.a, eye_y, 0.22 * f.a, 0.11 * f.b),
        "nose" => {
            let (top, bottom) = (f.cy - 0.05 * f.b, f.cy + 0.28 * f.b);
            if y < top || y > bottom {
                return false;
            }
            let half = 0.14 * f.a * (y - top) / (bottom - top);
            (x - f.cx).abs() <= half
        }
        "mouth" => in_ellipse(x, y, f.cx, f.cy + 0.52 * f.b, 0.36 * f.a, 0.1 * f.b),
        "glasses" => {
            let bar = eye_y - 0.15 * f.b;
            (y - bar).abs() <= 0.06 * f.b && (x - f.cx).abs() <= 0.78 * f.a
        }
        "earring" => {
            let ey = f.cy + 0.2 * f.b;
            let r = 0.13 * f.a;
            in_ellipse(x, y, f.cx - f.a, ey, r, r) || in_ellipse(x, y, f.cx + f.a, ey, r, r)
        }
        "necklace" => {
            let (ny, r) = (f.cy + 0.35 * f.b, 0.95 * f.b);
            let d = ((x - f.cx).powi(2) + (y - ny).powi(2)).sqrt();
            (d - r).abs() <= 0.06 * f.b && y > f.cy + 0.8 * f.b
        }
        "hat" => {
            (x - f.cx).abs() <= 1.2 * f.a && y >= f.cy - 1.3 * f.b && y <= f.cy - 0.72 * f.b
        }
        _ => false,
    }
}

/// Renders scene `index`: a pure function of `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let res = spec.resolution;
    let scale = 64.0 / res as f64;
    let mut geo = SplitMix64::new(hash_words(&[spec.seed, index, GEOMETRY_TAG]));
    let face = Face {
        cx: 32.0 + geo.uniform(-4.0, 4.0),
        cy: 30.0 + geo.uniform(-2.0, 3.0),
        a: geo.uniform(14.0, 18.0),
        b: geo.uniform(17.0, 21.0),
    };
    let brightness = geo.uniform(0.85, 1.15);
    let background = [geo.uniform(0.15, 0.85), geo.uniform(0.15, 0.85), geo.uniform(0.15, 0.85)];

    // Paint order: background, then catalog classes in renderer order.
    let mut layers: Vec<(usize, &str)> = Vec::new();
    for shape in SHAPES {
        if let Some(c) = spec.classes.iter().find(|c| c.name == shape) {
            if class_present(spec, index, c) {
                layers.push((c.id, shape));
            }
        }
    }

    // Per-class appearance: jittered base color and a sinusoidal texture.
    let n = spec.classes.len();
    let mut colors = vec![[0.0; 3]; n];
    let mut texture = vec![[0.0; 3]; n];
    for c in &spec.classes {
        let mut r = SplitMix64::new(hash_words(&[spec.seed, index, c.id as u64, COLOR_TAG]));
        let base = if c.id == 0 { background } else { base_color(&c.name) };
        for ch in 0..3 {
            colors[c.id][ch] = base[ch] + r.uniform(-COLOR_JITTER, COLOR_JITTER);
        }
        // Frequencies (radians per canvas pixel) and phase.
        texture[c.id] = [r.uniform(0.2, 0.9), r.uniform(0.2, 0.9), r.uniform(0.0, std::f64::consts::TAU)];
    }

    let mut noise = SplitMix64::new(hash_words(&[spec.seed, index, NOISE_TAG]));
    let mut ids = vec![0u8; res * res];
    let mut pixels = vec![0f32; 3 * res * res];
    for py in 0..res {
        for px in 0..res {
            let (x, y) = ((px as f64 + 0.5) * scale - 0.5, (py as f64 + 0.5) * scale - 0.5);
            let mut id = 0;
            for &(cid, shape) in &layers {
                if covers(shape, &face, x, y) {
                    id = cid;
                }
            }
            ids[py * res + px] = id as u8;
            let [fx, fy, phase] = texture[id];
            let tex = TEXTURE_AMPLITUDE * (fx * x + fy * y + phase).sin();
            for ch in 0..3 {
                let v = brightness * colors[id][ch] + tex + noise.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE);
                pixels[(ch * res + py) * res + px] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(&[3, res, res], pixels)?,
        mask: LabelMask::new(1, res, res, ids)?,
    })
}
