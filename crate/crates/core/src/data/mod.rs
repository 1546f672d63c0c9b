//! Datasets: the procedural long-tail scene generator, on-disk dataset
//! directories, and geometric augmentation.

mod augment;
mod io;
mod scene;

pub use augment::{augment, warp, AugmentConfig, Warp};
pub use io::{
    load_dataset_dir, load_samples, parse_classes, read_classes, read_image, write_classes, write_dataset,
    write_sample, DatasetIndex, IndexEntry,
};
pub use scene::{class_present, generate_scene, SHAPES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objective::LabelMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Head,
    Tail,
}

/// One catalog entry. `p` is the probability that a scene contains the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub kind: ClassKind,
    pub p: f64,
}

impl ClassInfo {
    pub fn new(id: usize, name: &str, kind: ClassKind, p: f64) -> Self {
        Self {
            id,
            name: name.to_string(),
            kind,
            p,
        }
    }
}

/// Background, six always-present parts and three accessories.
pub fn default_catalog() -> Vec<ClassInfo> {
    use ClassKind::{Head, Tail};
    vec![
        ClassInfo::new(0, "background", Head, 1.0),
        ClassInfo::new(1, "skin", Head, 1.0),
        ClassInfo::new(2, "hair", Head, 1.0),
        ClassInfo::new(3, "left_eye", Head, 1.0),
        ClassInfo::new(4, "right_eye", Head, 1.0),
        ClassInfo::new(5, "nose", Head, 1.0),
        ClassInfo::new(6, "mouth", Head, 1.0),
        ClassInfo::new(7, "glasses", Tail, 0.26),
        ClassInfo::new(8, "earring", Tail, 0.26),
        ClassInfo::new(9, "necklace", Tail, 0.05),
    ]
}

/// Ids must be `0..N` in order with background first; at most 256 classes.
pub fn validate_catalog(classes: &[ClassInfo]) -> Result<()> {
    if classes.len() < 2 || classes.len() > 256 {
        return Err(Error::Validation(format!(
            "catalog needs 2..=256 classes, has {}",
            classes.len()
        )));
    }
    if classes[0].name != "background" {
        return Err(Error::Validation(format!(
            "class 0 must be background, found `{}`",
            classes[0].name
        )));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.id != i {
            return Err(Error::Validation(format!(
                "class `{}` has id {} at position {i}",
                c.name, c.id
            )));
        }
        if !(0.0..=1.0).contains(&c.p) {
            return Err(Error::Validation(format!(
                "class `{}` has probability {} outside [0, 1]",
                c.name, c.p
            )));
        }
        if c.kind == ClassKind::Head && c.p != 1.0 {
            return Err(Error::Validation(format!(
                "head class `{}` must have probability 1, has {}",
                c.name, c.p
            )));
        }
        if classes[..i].iter().any(|o| o.name == c.name) {
            return Err(Error::Validation(format!("duplicate class `{}`", c.name)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub resolution: usize,
    pub seed: u64,
    pub classes: Vec<ClassInfo>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            seed: 0,
            classes: default_catalog(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_resolution(self.resolution)?;
        validate_catalog(&self.classes)?;
        for c in &self.classes[1..] {
            if !SHAPES.contains(&c.name.as_str()) {
                return Err(Error::Validation(format!(
                    "the scene renderer has no shape for class `{}` (known: {})",
                    c.name,
                    SHAPES.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Replaces the occurrence probabilities of the tail classes, in order.
    pub fn with_tail_probabilities(mut self, probs: &[f64]) -> Result<Self> {
        let tails: Vec<&mut ClassInfo> = self
            .classes
            .iter_mut()
            .filter(|c| c.kind == ClassKind::Tail)
            .collect();
        if tails.len() != probs.len() {
            return Err(Error::Validation(format!(
                "{} tail probabilities for {} tail classes",
                probs.len(),
                tails.len()
            )));
        }
        for (c, &p) in tails.into_iter().zip(probs) {
            c.p = p;
        }
        Ok(self)
    }
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || !resolution.is_multiple_of(32) {
        return Err(Error::Validation(format!(
            "resolution {resolution} is not a positive multiple of 32"
        )));
    }
    Ok(())
}

/// An image `3×H×W` with values in [0, 1] and its label mask `1×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Stacks samples into a `B×3×H×W` batch and a `B×H×W` mask.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, LabelMask)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<LabelMask> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, LabelMask::stack(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_is_valid() {
        SceneSpec::default().validate().unwrap();
        let cat = default_catalog();
        assert_eq!(cat.len(), 10);
        let tails: Vec<f64> = cat.iter().filter(|c| c.kind == ClassKind::Tail).map(|c| c.p).collect();
        assert_eq!(tails, vec![0.26, 0.26, 0.05]);
    }

    #[test]
    fn catalog_rejections() {
        let mut cat = default_catalog();
        cat[3].p = 0.5;
        assert!(validate_catalog(&cat).is_err());
        let mut cat = default_catalog();
        cat.swap(1, 2);
        assert!(validate_catalog(&cat).is_err());
        let mut spec = SceneSpec::default();
        spec.classes[9].name = "scarf".into();
        assert!(spec.validate().unwrap_err().to_string().contains("scarf"));
        spec = SceneSpec { resolution: 48, ..SceneSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tail_probability_override() {
        let spec = SceneSpec::default().with_tail_probabilities(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(spec.classes[8].p, 0.5);
        assert!(SceneSpec::default().with_tail_probabilities(&[0.1]).is_err());
    }
}
