//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, CirclesSpec, Dataset, MixtureSpec};
use crate::error::{Error, Result};
use crate::feature_net::FeatureExtractorConfig;
use crate::het_noise::HetHeadConfig;
use crate::model::{ModelConfig, PredictConfig, RffConfig, TrainConfig, VariantKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoMoonsSpec {
    pub n: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for TwoMoonsSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub path: PathBuf,
    pub label_column: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons(TwoMoonsSpec),
    GaussianMixture(MixtureSpec),
    NoisyCircles(CirclesSpec),
    Csv(CsvSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons(TwoMoonsSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::TwoMoons(s) => data::two_moons(s.n, s.noise_sd, s.seed),
            DatasetSpec::GaussianMixture(s) => data::gaussian_mixture_with_ood(s),
            DatasetSpec::NoisyCircles(s) => data::noisy_concentric_circles(s),
            DatasetSpec::Csv(s) => {
                if !s.delimiter.is_ascii() {
                    return Err(Error::InvalidConfig(format!(
                        "delimiter `{}` is not a single ASCII character",
                        s.delimiter
                    )));
                }
                data::load_csv(&s.path, &s.label_column, s.delimiter as u8)
            }
        }
    }

    /// Reads a standalone dataset spec from a JSON file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything a `train` run needs. Missing keys take defaults, unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub variant: VariantKind,
    pub features: FeatureExtractorConfig,
    pub rff: RffConfig,
    pub het: HetHeadConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    /// Held-out fraction for the train/test split.
    pub test_fraction: f64,
    /// Standardize features with statistics of the training split.
    pub standardize: bool,
    pub output_dir: PathBuf,
    /// Seeds the split, and training unless `train.seed` is changed after
    /// loading (ensemble members do this).
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            variant: VariantKind::Hetsngp,
            features: FeatureExtractorConfig::default(),
            rff: RffConfig::default(),
            het: HetHeadConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            test_fraction: 0.2,
            standardize: true,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        self.train.validate()?;
        self.features.validate()?;
        if self.predict.mc_samples == 0 || !(self.predict.temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "predict.mc_samples must be >= 1 and temperature positive".into(),
            ));
        }
        if self.variant.uses_gp() && (self.rff.num_features == 0 || !(self.rff.lengthscale > 0.0)) {
            return Err(Error::InvalidConfig(
                "rff.num_features must be >= 1 and lengthscale positive".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            features: self.features.clone(),
            rff: self.rff.clone(),
            het: self.het.clone(),
            train: self.train.clone(),
            predict: self.predict.clone(),
        }
    }
}
