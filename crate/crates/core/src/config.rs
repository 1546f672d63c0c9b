//! Run configuration: one TOML document covering data, model, loss,
//! training, augmentation and the diagnostic commands, with dotted-key
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_scene, load_dataset_dir, load_samples, AugmentConfig, ClassInfo, Sample, SceneSpec};
use crate::error::{Error, Result};
use crate::gradcheck_suite::GradcheckConfig;
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory for training; procedural scenes when absent.
    pub train_dir: Option<PathBuf>,
    /// Dataset directory for evaluation; procedural scenes when absent.
    pub eval_dir: Option<PathBuf>,
    /// Procedural training split: scenes `0..train_count`.
    pub train_count: usize,
    /// Procedural held-out split: the `eval_count` scenes after the training split.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            eval_dir: None,
            train_count: 2000,
            eval_count: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            iterations: 20,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Scene generator. `gen-data` renders at `scene.resolution`; training
    /// and evaluation render procedural scenes at `train.resolution`.
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            gradcheck: GradcheckConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_text_with(text, &[])
    }

    /// Reads `path` (defaults when `None`), applies `key=value` overrides in
    /// order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_text_with(&text, overrides).map_err(|e| match (path, e) {
            (Some(p), Error::Config(m)) => Error::Config(format!("{}: {m}", p.display())),
            (_, e) => e,
        })
    }

    /// Parses `text`, applies overrides in order, then validates.
    pub fn from_text_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.gradcheck.model.validate()?;
        if self.bench.iterations == 0 || self.bench.batch_size == 0 {
            return Err(Error::Config("bench needs at least one iteration of at least one image".into()));
        }
        Ok(())
    }

    /// Scene generator used for procedural training and evaluation data.
    pub fn training_scenes(&self) -> SceneSpec {
        SceneSpec {
            resolution: self.train.resolution,
            ..self.scene.clone()
        }
    }

    /// Samples and class catalog of one split at the training resolution.
    pub fn load_split(&self, split: Split) -> Result<(Vec<Sample>, Vec<ClassInfo>)> {
        let dir = match split {
            Split::Train => &self.data.train_dir,
            Split::Eval => &self.data.eval_dir,
        };
        if let Some(dir) = dir {
            let index = load_dataset_dir(dir)?;
            let samples = load_samples(&index, self.train.resolution)?;
            return Ok((samples, index.classes));
        }
        let spec = self.training_scenes();
        let (start, count) = match split {
            Split::Train => (0, self.data.train_count),
            Split::Eval => (self.data.train_count, self.data.eval_count),
        };
        let samples = (start..start + count)
            .map(|i| generate_scene(&spec, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, spec.classes))
    }

    /// Writes the effective configuration to `output_dir/config.toml`.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Sets a dotted key such as `train.lr0=3e-4`. The value is parsed as TOML
/// and falls back to a bare string (`output_dir=runs/a`). Intermediate tables
/// are created as needed; misspelled keys are rejected when the document is
/// deserialized.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
