//! Raster exports for inference results.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use segface_core::numerics::Tensor;
use segface_core::objective::LabelMask;

use crate::Failure;

/// Class colors; ids past the end wrap around.
pub const PALETTE: [[u8; 3]; 19] = [
    [0, 0, 0],
    [204, 0, 0],
    [76, 153, 0],
    [204, 204, 0],
    [51, 51, 255],
    [204, 0, 204],
    [0, 255, 255],
    [255, 204, 204],
    [102, 51, 0],
    [255, 0, 0],
    [102, 204, 0],
    [255, 255, 0],
    [0, 0, 153],
    [0, 0, 204],
    [255, 51, 153],
    [0, 204, 204],
    [0, 51, 0],
    [255, 153, 51],
    [0, 204, 0],
];

pub fn color(id: u8) -> [u8; 3] {
    PALETTE[id as usize % PALETTE.len()]
}

fn save<P: image::PixelWithColorType>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<(), Failure>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Single-channel raster whose pixel values are class ids.
pub fn mask_png(mask: &LabelMask, res: usize, path: &Path) -> Result<(), Failure> {
    let img = GrayImage::from_raw(res as u32, res as u32, mask.ids().to_vec())
        .ok_or_else(|| Failure::Runtime("mask size mismatch".into()))?;
    save(&img, path)
}

/// Image blended half-and-half with the class color; background pixels are
/// left as they are.
pub fn overlay_png(image: &Tensor<f32>, mask: &LabelMask, path: &Path) -> Result<(), Failure> {
    let [_, h, w] = mask.shape();
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let id = mask.ids()[y * w + x];
        let c = color(id);
        Rgb(std::array::from_fn(|ch| {
            let v = d[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0;
            let v = if id == 0 { v } else { 0.5 * v + 0.5 * c[ch] as f32 };
            v.round() as u8
        }))
    });
    save(&img, path)
}

/// Grayscale map of class `k`'s logits through a sigmoid, scaled to [0, 255].
pub fn token_map_png(logits: &Tensor<f32>, k: usize, path: &Path) -> Result<(), Failure> {
    let &[_, _, h, w] = logits.shape() else {
        return Err(Failure::Runtime(format!("logits shape {:?}", logits.shape())));
    };
    let plane = &logits.data()[k * h * w..(k + 1) * h * w];
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let z = plane[y as usize * w + x as usize] as f64;
        Luma([(255.0 / (1.0 + (-z).exp())).round() as u8])
    });
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_wraps_and_background_is_black() {
        assert_eq!(color(0), [0, 0, 0]);
        assert_eq!(color(19), color(0));
        assert_eq!(color(20), color(1));
    }

    #[test]
    fn token_map_is_sigmoid_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let logits = Tensor::from_vec(&[1, 2, 1, 2], vec![0.0, 100.0, -100.0, 0.0]).unwrap();
        let path = dir.path().join("t.png");
        token_map_png(&logits, 0, &path).unwrap();
        let img = image::open(&path).unwrap().into_luma8();
        assert_eq!(img.into_raw(), vec![128, 255]);
        token_map_png(&logits, 1, &path).unwrap();
        assert_eq!(image::open(&path).unwrap().into_luma8().into_raw(), vec![0, 128]);
    }

    #[test]
    fn overlay_keeps_background_and_tints_classes() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor::full(&[3, 1, 2], 1.0f32);
        let mask = LabelMask::new(1, 1, 2, vec![0, 1]).unwrap();
        let path = dir.path().join("o.png");
        overlay_png(&image, &mask, &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [230, 128, 128]);
    }
}
