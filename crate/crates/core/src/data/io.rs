//! Dataset directories: `images/<stem>.png`, `masks/<stem>.png` (8-bit
//! single-channel class ids) and a `classes.txt` catalog.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};

use super::{generate_scene, validate_catalog, ClassInfo, ClassKind, Sample, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::ops::bilinear_resize;
use crate::numerics::Tensor;
use crate::objective::LabelMask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<ClassInfo>,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// One line per class: `id<TAB>name<TAB>head|tail<TAB>p`.
pub fn parse_classes(text: &str) -> Result<Vec<ClassInfo>> {
    let mut classes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Validation(format!("classes.txt line {}: {what}: `{line}`", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, name, kind, p] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let kind = match kind {
            "head" => ClassKind::Head,
            "tail" => ClassKind::Tail,
            _ => return Err(bad("kind must be head or tail")),
        };
        classes.push(ClassInfo {
            id: id.parse().map_err(|_| bad("bad id"))?,
            name: name.to_string(),
            kind,
            p: p.parse().map_err(|_| bad("bad probability"))?,
        });
    }
    validate_catalog(&classes)?;
    Ok(classes)
}

pub fn read_classes(path: &Path) -> Result<Vec<ClassInfo>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_classes(&text)
}

pub fn write_classes(path: &Path, classes: &[ClassInfo]) -> Result<()> {
    let mut text = String::new();
    for c in classes {
        let kind = match c.kind {
            ClassKind::Head => "head",
            ClassKind::Tail => "tail",
        };
        text += &format!("{}\t{}\t{kind}\t{}\n", c.id, c.name, c.p);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Files of `dir` keyed by stem; a missing directory lists as empty.
fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if out.insert(stem.to_string(), path.clone()).is_some() {
                return Err(Error::Validation(format!(
                    "stem `{stem}` appears twice in {}",
                    dir.display()
                )));
            }
        }
    }
    Ok(out)
}

fn read_mask(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    if img.color() != ColorType::L8 {
        return Err(Error::Validation(format!(
            "{}: mask must be 8-bit single-channel, found {:?}",
            path.display(),
            img.color()
        )));
    }
    Ok(img.into_luma8())
}

/// Indexes and validates a dataset directory. Every image needs a mask with
/// the same stem and size, and every mask id must be below the catalog size.
pub fn load_dataset_dir(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Validation(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    for stem in images.keys() {
        if !masks.contains_key(stem) {
            return Err(Error::Validation(format!("image `{stem}` has no mask")));
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            return Err(Error::Validation(format!("mask `{stem}` has no image")));
        }
    }
    let classes_path = root.join("classes.txt");
    let classes = if classes_path.exists() {
        read_classes(&classes_path)?
    } else if images.is_empty() {
        Vec::new()
    } else {
        return Err(Error::Validation(format!(
            "{} is missing classes.txt",
            root.display()
        )));
    };
    let mut entries = Vec::with_capacity(images.len());
    for (stem, image) in images {
        let mask = masks[&stem].clone();
        let (w, h) = image::image_dimensions(&image).map_err(|e| image_error(&image, e))?;
        let m = read_mask(&mask)?;
        if m.dimensions() != (w, h) {
            return Err(Error::Validation(format!(
                "`{stem}`: image is {w}x{h} but mask is {}x{}",
                m.width(),
                m.height()
            )));
        }
        if let Some((x, y, p)) = m.enumerate_pixels().find(|(_, _, p)| p.0[0] as usize >= classes.len()) {
            return Err(Error::Validation(format!(
                "{}: pixel (x {x}, y {y}) has id {} but the catalog has {} classes",
                mask.display(),
                p.0[0],
                classes.len()
            )));
        }
        entries.push(IndexEntry {
            stem,
            image,
            mask,
            height: h as usize,
            width: w as usize,
        });
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        entries,
    })
}

fn nearest_resize(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    let [b, h, w] = mask.shape();
    let tap = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut ids = Vec::with_capacity(b * out_h * out_w);
    for bi in 0..b {
        for y in 0..out_h {
            let sy = tap(y, h, out_h);
            for x in 0..out_w {
                ids.push(mask.ids()[(bi * h + sy) * w + tap(x, w, out_w)]);
            }
        }
    }
    LabelMask::new(b, out_h, out_w, ids)
}

/// Reads a raster as a `3×resolution×resolution` tensor with values in
/// [0, 1], resizing bilinearly when the stored size differs.
pub fn read_image(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    super::check_resolution(resolution)?;
    let rgb = image::open(path).map_err(|err| image_error(path, err))?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = p.0[ch] as f32 / 255.0;
        }
    }
    let image = Tensor::from_vec(&[3, h, w], data)?;
    if (h, w) == (resolution, resolution) {
        return Ok(image);
    }
    bilinear_resize(&image.reshape(&[1, 3, h, w])?, resolution, resolution)?.reshape(&[3, resolution, resolution])
}

/// Loads every indexed pair, resized to `resolution × resolution` (bilinear
/// image, nearest-neighbor mask) when the stored size differs.
pub fn load_samples(index: &DatasetIndex, resolution: usize) -> Result<Vec<Sample>> {
    super::check_resolution(resolution)?;
    index
        .entries
        .iter()
        .map(|e| {
            let image = read_image(&e.image, resolution)?;
            let m = read_mask(&e.mask)?;
            let (h, w) = (m.height() as usize, m.width() as usize);
            let mut mask = LabelMask::new(1, h, w, m.into_raw())?;
            if (h, w) != (resolution, resolution) {
                mask = nearest_resize(&mask, resolution, resolution)?;
            }
            Ok(Sample { image, mask })
        })
        .collect()
}

pub fn write_sample(root: &Path, stem: &str, sample: &Sample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let d = sample.image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| (d[(ch * h + y as usize) * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    let mask = GrayImage::from_raw(w as u32, h as u32, sample.mask.ids()[..h * w].to_vec())
        .ok_or_else(|| Error::shape("write_sample", "mask size"))?;
    let image_path = root.join("images").join(format!("{stem}.png"));
    let mask_path = root.join("masks").join(format!("{stem}.png"));
    rgb.save(&image_path).map_err(|e| image_error(&image_path, e))?;
    mask.save(&mask_path).map_err(|e| image_error(&mask_path, e))
}

/// Renders scenes `indices` into `root` (stems are the scene indices) and
/// returns, per class, the number of scenes containing it.
pub fn write_dataset(root: &Path, spec: &SceneSpec, indices: Range<u64>) -> Result<Vec<usize>> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_classes(&root.join("classes.txt"), &spec.classes)?;
    let mut occurrences = vec![0; spec.classes.len()];
    for i in indices {
        let sample = generate_scene(spec, i)?;
        let mut seen = vec![false; spec.classes.len()];
        sample.mask.ids().iter().for_each(|&id| seen[id as usize] = true);
        occurrences.iter_mut().zip(&seen).for_each(|(o, &s)| *o += s as usize);
        write_sample(root, &format!("{i:06}"), &sample)?;
    }
    Ok(occurrences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_catalog;

    #[test]
    fn empty_directory_is_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let idx = load_dataset_dir(dir.path()).unwrap();
        assert!(idx.is_empty());
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        write_dataset(dir.path(), &spec, 0..3).unwrap();
        let idx = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.classes, default_catalog());
        let samples = load_samples(&idx, 64).unwrap();
        let original = generate_scene(&spec, 1).unwrap();
        assert_eq!(samples[1].mask, original.mask);
        // Images are quantized to 8 bits on disk.
        assert!(samples[1].image.max_abs_diff(&original.image) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn one_pair_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { resolution: 32, ..SceneSpec::default() };
        write_dataset(dir.path(), &spec, 0..1).unwrap();
        let idx = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(idx.len(), 1);
        let s = &load_samples(&idx, 64).unwrap()[0];
        assert_eq!(s.mask.shape(), [1, 64, 64]);
        assert_eq!(s.image.shape(), &[3, 64, 64]);
    }

    #[test]
    fn out_of_range_id_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { resolution: 32, ..SceneSpec::default() };
        let mut sample = generate_scene(&spec, 0).unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        write_classes(&dir.path().join("classes.txt"), &spec.classes).unwrap();
        sample.mask.ids_mut()[5] = 10;
        write_sample(dir.path(), "bad", &sample).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bad.png") && err.contains("x 5, y 0"), "{err}");
    }

    #[test]
    fn missing_pair_names_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &SceneSpec { resolution: 32, ..SceneSpec::default() }, 0..2).unwrap();
        fs::remove_file(dir.path().join("masks/000001.png")).unwrap();
        let err = load_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000001"), "{err}");
    }

    #[test]
    fn classes_file_parsing() {
        assert!(parse_classes("0\tbackground\thead\t1\n1\tskin\thead\t1\n").is_ok());
        assert!(parse_classes("0\tbackground\thead\n").is_err());
        assert!(parse_classes("0\tbackground\tmiddle\t1\n1\tskin\thead\t1\n").is_err());
    }

    #[test]
    fn regenerating_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SceneSpec { resolution: 32, ..SceneSpec::default() };
        write_dataset(a.path(), &spec, 0..2).unwrap();
        write_dataset(b.path(), &spec, 0..2).unwrap();
        for f in ["images/000001.png", "masks/000000.png", "classes.txt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
