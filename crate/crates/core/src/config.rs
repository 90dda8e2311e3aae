//! Run configuration files.
//!
//! A TOML file is merged key by key over the defaults, so every field has a
//! value. `[model] preset = "small"` picks the base architecture before the
//! remaining `[model]` keys apply, and an `[sra]` table starts from the
//! layer pair scaled to the model depth. The top-level `seed` drives
//! training, sampling and probing; the dataset keeps its own seed so runs
//! with different seeds share data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{self, Dataset, ShapesConfig};
use crate::diagnostics::AnalyzeConfig;
use crate::process::ProcessConfig;
use crate::sampler::SampleConfig;
use crate::sra::SraConfig;
use crate::trainer::{TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct DatasetConfig {
    /// Load this archive instead of generating shapes.
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub shapes: ShapesConfig,
}


impl DatasetConfig {
    pub fn build(&self) -> Result<Dataset> {
        match &self.path {
            Some(p) => Dataset::load(p),
            None => data::generate_shapes_with(&self.shapes),
        }
    }
}

/// Layers and timesteps probed by `analyze` and `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Empty means the alignment pair, or every layer for a baseline.
    pub layers: Vec<usize>,
    /// Family units.
    pub timesteps: Vec<f64>,
    /// Held-out probe set size; drawn with `dataset.seed + 1`.
    pub probe_samples: usize,
    #[serde(flatten)]
    pub analyze: AnalyzeConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            layers: Vec::new(),
            timesteps: Vec::new(),
            probe_samples: 1000,
            analyze: AnalyzeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub process: ProcessConfig,
    pub train: TrainConfig,
    pub sra: Option<SraConfig>,
    pub sample: SampleConfig,
    pub dataset: DatasetConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            model: ModelConfig::default(),
            process: ProcessConfig::default(),
            train: TrainConfig::default(),
            sra: None,
            sample: SampleConfig::default(),
            dataset: DatasetConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

pub(crate) fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn to_value<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("config types serialise to TOML")
}

impl RunConfig {
    /// Resolves TOML text against the defaults and validates the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {e}")))?;

        let mut model_base = ModelConfig::default();
        if let Some(toml::Value::Table(m)) = user.get_mut("model") {
            if let Some(p) = m.remove("preset") {
                let name = p
                    .as_str()
                    .ok_or_else(|| Error::Config("model.preset must be a string".into()))?;
                model_base = ModelConfig::preset(name)?;
            }
        }
        let mut base = to_value(&RunConfig {
            model: model_base,
            ..RunConfig::default()
        });
        let sra_over = user.remove("sra");
        merge(&mut base, toml::Value::Table(user));
        let mut cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;

        if let Some(over) = sra_over {
            let defaults = SraConfig::for_model(cfg.process.family(), cfg.model.depth);
            let mut v = to_value(&defaults);
            merge(&mut v, over);
            cfg.sra = Some(
                v.try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("invalid [sra]: {e}")))?,
            );
        }
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn resolve_seeds(&mut self) {
        self.train.seed = self.seed;
        self.sample.seed = self.seed;
        self.analysis.analyze.probe.seed = self.seed;
        self.analysis.analyze.feature_seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        let family = self.process.family();
        self.process.build()?;
        self.sample.check_family(family)?;
        if let Some(s) = &self.sra {
            s.validate(self.model.depth, family)?;
        }
        if self.dataset.path.is_none() {
            self.dataset.shapes.validate()?;
            if self.dataset.shapes.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but the model expects {}",
                    self.dataset.shapes.num_classes, self.model.num_classes
                )));
            }
            let s = self.dataset.shapes.size;
            if (s, s, 1) != (self.model.input_height, self.model.input_width, self.model.channels) {
                return Err(Error::Config(format!(
                    "dataset images are {s}x{s}x1 but the model expects {}x{}x{}",
                    self.model.input_height, self.model.input_width, self.model.channels
                )));
            }
        }
        if let Some(c) = self.sample.class_id {
            if c >= self.model.num_classes {
                return Err(Error::out_of_range("sample.class_id", c as f64, format!("[0, {})", self.model.num_classes)));
            }
        }
        for &l in &self.analysis.layers {
            if l < 1 || l > self.model.depth {
                return Err(Error::out_of_range("analysis layer", l as f64, format!("[1, {}]", self.model.depth)));
            }
        }
        for &t in &self.analysis.timesteps {
            family.timestep(t)?;
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::new(self.model.clone(), self.process, self.train.clone(), self.sra.clone())
    }

    /// Layers probed when none are configured.
    pub fn probe_layers(&self) -> Vec<usize> {
        if !self.analysis.layers.is_empty() {
            return self.analysis.layers.clone();
        }
        match &self.sra {
            Some(s) if s.student_layer == s.teacher_layer => vec![s.student_layer],
            Some(s) => vec![s.student_layer, s.teacher_layer],
            None => (1..=self.model.depth).collect(),
        }
    }

    /// Timesteps probed when none are configured: clean inputs and the
    /// middle of the path.
    pub fn probe_timesteps(&self) -> Vec<f64> {
        if !self.analysis.timesteps.is_empty() {
            return self.analysis.timesteps.clone();
        }
        match self.process {
            ProcessConfig::Flow { .. } => vec![0.0, 0.5],
            ProcessConfig::Denoise { steps, .. } => vec![0.0, (steps / 2) as f64],
        }
    }

    /// Held-out probe images from the same generator as the training set.
    pub fn probe_dataset(&self) -> Result<Dataset> {
        let shapes = ShapesConfig {
            num: self.analysis.probe_samples.max(self.dataset.shapes.num_classes),
            seed: self.dataset.shapes.seed.wrapping_add(1),
            ..self.dataset.shapes.clone()
        };
        data::generate_shapes_with(&shapes)
    }
}
