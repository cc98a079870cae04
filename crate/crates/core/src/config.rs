//! JSON run configuration for training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError};
use crate::synth;
use crate::train::{Dataset, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Invalid(String),
}

/// Where training or evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Every PNG in a directory.
    Dir { path: PathBuf },
    /// Procedural scenes from [`synth::textures`].
    Synthetic { count: usize, size: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, TrainError> {
        match self {
            Self::Dir { path } => Dataset::from_dir(path),
            Self::Synthetic { count, size, seed } => {
                let mut d = Dataset::from_images(synth::textures(*count, *size, *seed))?;
                d.names = (0..*count).map(|i| format!("synth_{:04}", *seed + i as u64)).collect();
                Ok(d)
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self {
            Self::Dir { path } if !path.is_dir() => {
                Err(ConfigError::Invalid(format!("{} is not a directory", path.display())))
            }
            Self::Synthetic { count, size, .. } if *count == 0 || *size == 0 => {
                Err(ConfigError::Invalid("synthetic count and size must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default)]
    pub eval: Option<DataSource>,
}

/// Output locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
    #[serde(default = "default_metrics")]
    pub metrics: String,
    #[serde(default = "default_effective")]
    pub effective_config: String,
}

fn default_checkpoint() -> String {
    "model.cuf".into()
}

fn default_metrics() -> String {
    "metrics.csv".into()
}

fn default_effective() -> String {
    "effective_config.json".into()
}

impl OutputConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }

    pub fn effective_config_path(&self) -> PathBuf {
        self.dir.join(&self.effective_config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds both parameter initialization and the training sampler.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks everything that can be checked without touching the output
    /// directory.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(fixed) = match self.model.head {
            crate::model::HeadConfig::Subpixel(c) => Some(c.scale),
            crate::model::HeadConfig::CufInstantiated { .. } => {
                return Err(ConfigError::Invalid("instantiated heads cannot be trained".into()));
            }
            crate::model::HeadConfig::Cuf(_) => None,
        } {
            if self.train.scale_min != fixed as f64 || self.train.scale_max != fixed as f64 {
                return Err(ConfigError::Invalid(format!(
                    "sub-pixel head at scale {fixed} needs scale_min = scale_max = {fixed}"
                )));
            }
        }
        self.data.train.validate()?;
        if let Some(e) = &self.data.eval {
            e.validate()?;
        }
        let o = &self.output;
        for name in [&o.checkpoint, &o.metrics, &o.effective_config] {
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(ConfigError::Invalid(format!("output file name {name:?} must be a plain file name")));
            }
        }
        if o.checkpoint == o.metrics || o.checkpoint == o.effective_config || o.metrics == o.effective_config {
            return Err(ConfigError::Invalid("output file names must differ".into()));
        }
        if o.dir.exists() && !o.dir.is_dir() {
            return Err(ConfigError::Invalid(format!("{} exists and is not a directory", o.dir.display())));
        }
        Ok(())
    }
}
