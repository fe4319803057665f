//! The composed classifier: feature extractor, mean head (random-feature GP
//! or plain affine), optional heteroscedastic noise head, and the baseline
//! ablations built from the same parts.

mod predict;
mod train;

pub use predict::{ensemble_predict, uncertainty_from_probs};
pub use train::{EpochLog, ModelGrads, TrainReport};

use serde::{Deserialize, Serialize};

use crate::dense::{Dense, Params};
use crate::error::{Error, Result};
use crate::feature_net::{FeatureExtractor, FeatureExtractorConfig, SpectralNormMode};
use crate::het_noise::{HetHead, HetHeadConfig};
use crate::linalg::{Matrix, Rng};
use crate::rff_gp::{CovarianceMode, GpPosterior, RffProjection};

/// Stream ids derived from the run seed.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const NOISE_STREAM: u64 = 2;
pub(crate) const PREDICT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Deterministic,
    Sngp,
    Heteroscedastic,
    Hetsngp,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Deterministic,
        VariantKind::Sngp,
        VariantKind::Heteroscedastic,
        VariantKind::Hetsngp,
    ];

    pub fn uses_gp(self) -> bool {
        matches!(self, VariantKind::Sngp | VariantKind::Hetsngp)
    }

    pub fn uses_het(self) -> bool {
        matches!(self, VariantKind::Heteroscedastic | VariantKind::Hetsngp)
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Deterministic => "deterministic",
            VariantKind::Sngp => "sngp",
            VariantKind::Heteroscedastic => "heteroscedastic",
            VariantKind::Hetsngp => "hetsngp",
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// How the `‖β̂‖²` prior term is weighted against the batch-mean likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPriorScaling {
    /// `beta_penalty·‖β̂‖²` added to every batch loss as is.
    PerBatch,
    /// `beta_penalty·‖β̂‖² / N`, the per-example share of the prior.
    PerDataset,
}

/// When the Laplace precision is accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacePass {
    /// During the final epoch, interleaved with the last updates of `β̂`.
    FinalEpoch,
    /// One extra pass over the training data after training, `β̂` frozen.
    PostTraining,
}

/// How the `S` Monte-Carlo logit samples enter the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McLoss {
    /// `−log((1/S) Σ_s softmax(u^s/τ)_y)`, the negative log of the
    /// Monte-Carlo predictive.
    LogMeanProb,
    /// `−(1/S) Σ_s log softmax(u^s/τ)_y`. Convexity makes any logit noise a
    /// pure penalty under this form.
    MeanLogProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RffConfig {
    pub num_features: usize,
    pub lengthscale: f64,
    /// Replace `lengthscale` by the median pairwise latent distance of the
    /// first training batch.
    pub median_lengthscale: bool,
    pub covariance: CovarianceMode,
}

impl Default for RffConfig {
    fn default() -> Self {
        Self {
            num_features: 1024,
            lengthscale: 1.0,
            median_lengthscale: false,
            covariance: CovarianceMode::ExactSum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta_penalty: f64,
    pub beta_prior_scaling: BetaPriorScaling,
    pub mc_samples: usize,
    pub temperature: f64,
    /// Sample `β` from the running Laplace posterior during training instead
    /// of using `β̂`.
    pub sample_beta: bool,
    pub laplace_pass: LaplacePass,
    pub mc_loss: McLoss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 1e-4,
            beta_penalty: 1.0,
            beta_prior_scaling: BetaPriorScaling::PerDataset,
            mc_samples: 10,
            temperature: 1.0,
            sample_beta: false,
            laplace_pass: LaplacePass::FinalEpoch,
            mc_loss: McLoss::LogMeanProb,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::EmptySchedule);
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and mc_samples must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate and temperature must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.beta_penalty >= 0.0) {
            return Err(Error::InvalidConfig(
                "weight_decay and beta_penalty must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub mc_samples: usize,
    pub temperature: f64,
    /// Use `β̂` instead of posterior draws.
    pub map_mode: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            mc_samples: 1000,
            temperature: 1.0,
            map_mode: false,
        }
    }
}

/// Everything needed to build a model of a given variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub features: FeatureExtractorConfig,
    pub rff: RffConfig,
    pub het: HetHeadConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureExtractorConfig::default(),
            rff: RffConfig::default(),
            het: HetHeadConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub num_classes: usize,
}

/// Random-feature GP mean head with its Laplace state.
#[derive(Clone, Debug, PartialEq)]
pub struct GpLayer {
    pub projection: RffProjection,
    pub posterior: GpPosterior,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeanHead {
    Affine(Dense),
    Gp(GpLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetSngpModel {
    pub variant: VariantKind,
    pub num_classes: usize,
    pub features: FeatureExtractor,
    pub mean: MeanHead,
    pub het: Option<HetHead>,
    pub rff_config: RffConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
}

/// Builds the architecture for `kind`. Deterministic and heteroscedastic
/// variants use an affine mean head and no spectral normalization.
pub fn build_variant(kind: VariantKind, dims: ModelDims, config: &ModelConfig) -> Result<HetSngpModel> {
    if dims.input_dim == 0 || dims.num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need input_dim >= 1 and num_classes >= 2, got {dims:?}"
        )));
    }
    config.train.validate()?;
    if config.predict.mc_samples == 0 || !(config.predict.temperature > 0.0) {
        return Err(Error::InvalidConfig(
            "predict.mc_samples must be >= 1 and temperature positive".into(),
        ));
    }
    if kind.uses_gp() && config.rff.num_features == 0 {
        return Err(Error::InvalidConfig("rff.num_features must be >= 1".into()));
    }
    if let CovarianceMode::Momentum { gamma } = config.rff.covariance {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {gamma}"
            )));
        }
    }
    let mut rng = Rng::with_stream(config.train.seed, INIT_STREAM);
    let mut fcfg = config.features.clone();
    fcfg.input_dim = dims.input_dim;
    if !kind.uses_gp() {
        fcfg.spectral_norm = SpectralNormMode::Off;
    }
    let mut features = FeatureExtractor::new(fcfg, &mut rng)?;
    if kind.uses_gp() {
        features.apply_spectral_normalization()?;
    }
    let latent = features.output_dim();
    let mean = if kind.uses_gp() {
        let projection = RffProjection::new(
            latent,
            config.rff.num_features,
            config.rff.lengthscale,
            &mut rng,
        )?;
        let posterior = GpPosterior::new(
            config.rff.num_features,
            dims.num_classes,
            config.rff.covariance,
        );
        MeanHead::Gp(GpLayer {
            projection,
            posterior,
        })
    } else {
        MeanHead::Affine(Dense::init(latent, dims.num_classes, 1.0, &mut rng))
    };
    let het = if kind.uses_het() {
        let mut hcfg = config.het.clone();
        hcfg.num_classes = dims.num_classes;
        Some(HetHead::new(hcfg, latent, &mut rng)?)
    } else {
        None
    };
    Ok(HetSngpModel {
        variant: kind,
        num_classes: dims.num_classes,
        features,
        mean,
        het,
        rff_config: config.rff.clone(),
        train: config.train.clone(),
        predict: config.predict.clone(),
    })
}

impl HetSngpModel {
    pub fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    pub fn gp(&self) -> Option<&GpLayer> {
        match &self.mean {
            MeanHead::Gp(g) => Some(g),
            MeanHead::Affine(_) => None,
        }
    }

    pub fn gp_mut(&mut self) -> Option<&mut GpLayer> {
        match &mut self.mean {
            MeanHead::Gp(g) => Some(g),
            MeanHead::Affine(_) => None,
        }
    }

    pub fn is_finalized(&self) -> bool {
        self.gp().is_none_or(|g| g.posterior.is_finalized())
    }

    /// Whether prediction draws `β` from the Laplace posterior.
    pub fn samples_beta(&self) -> bool {
        self.gp().is_some() && !self.predict.map_mode
    }

    /// Mean logits `Φ·β̂` (or `h·A + a`) without any noise.
    pub fn mean_logits(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.features.embed(x)?;
        match &self.mean {
            MeanHead::Affine(d) => d.forward(&h),
            MeanHead::Gp(g) => g.posterior.logits_mean(&g.projection.featurize(&h)?),
        }
    }

    /// Latent predictive variance `Σ_c Φᵀ Σ_c Φ` of the GP head.
    pub fn gp_variance(&self, x: &Matrix) -> Result<Vec<f64>> {
        let g = self
            .gp()
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no GP head", self.variant)))?;
        let phi = g.projection.featurize(&self.features.embed(x)?)?;
        g.posterior.predictive_variance(&phi)
    }

    /// RNG used for the post-training accuracy and for default evaluation,
    /// so reports can be recomputed exactly.
    pub fn prediction_rng(&self) -> Rng {
        Rng::with_stream(self.train.seed, PREDICT_STREAM)
    }

    /// Trainable parameter count (`θ`, `φ` and `β̂`/affine head).
    pub fn num_params(&self) -> usize {
        let mean = match &self.mean {
            MeanHead::Affine(d) => d.num_params(),
            MeanHead::Gp(g) => g.posterior.beta_hat.data().len(),
        };
        self.features.num_params() + mean + self.het.as_ref().map_or(0, |h| h.num_params())
    }
}

impl Params for HetSngpModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.features.param_slices();
        match &self.mean {
            MeanHead::Affine(d) => out.extend(d.param_slices()),
            MeanHead::Gp(g) => out.push(g.posterior.beta_hat.data()),
        }
        if let Some(h) = &self.het {
            out.extend(h.param_slices());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.features.param_slices_mut();
        match &mut self.mean {
            MeanHead::Affine(d) => out.extend(d.param_slices_mut()),
            MeanHead::Gp(g) => out.push(g.posterior.beta_hat.data_mut()),
        }
        if let Some(h) = &mut self.het {
            out.extend(h.param_slices_mut());
        }
        out
    }
}

/// Row-wise `softmax(logits / τ)`.
pub fn tempered_softmax(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), temperature);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let inv_t = 1.0 / temperature;
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - mx) * inv_t).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
