//! Run configuration: one TOML file with data, model, train, eval and
//! ablation sections. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use refpose::data::SynthConfig;
use refpose::model::{EvalConfig, ModelConfig};
use refpose::pyramid::LevelStrategy;
use refpose::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    Coco,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizeConfig {
    pub shorter: usize,
    pub max_longer: usize,
}

impl Default for ResizeConfig {
    fn default() -> Self {
        Self {
            shorter: 800,
            max_longer: 1333,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Output directory of `gen-data`; when absent, synthetic data is
    /// generated in memory from `[data.synth]`.
    pub dataset_dir: Option<PathBuf>,
    /// COCO keypoint annotation file.
    pub annotations: Option<PathBuf>,
    /// Directory holding the PNG files named in the annotation file.
    pub images_dir: Option<PathBuf>,
    /// Shorter-side resize for COCO images; off unless present.
    pub resize: Option<ResizeConfig>,
    /// Keep only the first N images.
    pub max_images: Option<usize>,
    /// The last N images are held out: training and ablations never see
    /// them, and evaluations score them. Zero evaluates on the training set.
    pub holdout: usize,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub magnification_start: f64,
    pub magnification_stop: f64,
    pub magnification_step: f64,
    /// Train a model per magnification instead of training once at
    /// `model.magnification`.
    pub magnification_train_per_point: bool,
    pub levels: Vec<LevelStrategy>,
    /// Train a model per level strategy instead of evaluating one model at
    /// every level.
    pub level_train_per_point: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            magnification_start: 1.0,
            magnification_stop: 1.5,
            magnification_step: 0.05,
            magnification_train_per_point: false,
            levels: vec![
                LevelStrategy::size_based(),
                LevelStrategy::Fixed(2),
                LevelStrategy::Fixed(3),
                LevelStrategy::Fixed(4),
                LevelStrategy::Fixed(5),
            ],
            level_train_per_point: true,
        }
    }
}

impl AblationConfig {
    /// Sweep points, rounded to the step's two decimals so that the
    /// endpoints are hit exactly.
    pub fn magnifications(&self) -> Vec<f64> {
        let n = ((self.magnification_stop - self.magnification_start) / self.magnification_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((self.magnification_start + i as f64 * self.magnification_step) * 1e6).round() / 1e6)
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.magnification_start >= 1.0 && self.magnification_stop >= self.magnification_start && self.magnification_step > 0.0) {
            return Err(CliError::Config(
                "ablation: need 1 <= magnification_start <= magnification_stop and a positive step".into(),
            ));
        }
        if self.levels.is_empty() {
            return Err(CliError::Config("ablation: levels must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.ablation.validate()?;
        if self.data.source == DataSource::Coco && self.data.annotations.is_none() {
            return Err(CliError::Config("data.source = \"coco\" needs data.annotations".into()));
        }
        Ok(())
    }
}
