//! Synthetic benchmark suite: label-noise accuracy on noisy circles and OOD
//! panels on the Gaussian mixture and two moons.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::data::{self, CirclesSpec, Dataset, MixtureSpec, Standardizer};
use crate::error::Result;
use crate::feature_net::{Activation, FeatureExtractorConfig};
use crate::linalg::{Matrix, Rng};
use crate::metrics::{accuracy, OodReport};
use crate::model::{
    build_variant, uncertainty_from_probs, HetSngpModel, ModelConfig, ModelDims,
    PredictConfig, RffConfig, TrainConfig, VariantKind,
};
use crate::het_noise::HetHeadConfig;

/// Seed offset separating held-out test draws from training draws.
const TEST_SEED_OFFSET: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelNoiseBench {
    /// Training set; its `seed` is replaced per benchmark seed.
    pub circles: CirclesSpec,
    pub test_n_per_class: usize,
    pub model: ModelConfig,
}

impl Default for LabelNoiseBench {
    fn default() -> Self {
        let mut model = bench_model(3);
        model.train.epochs = 1000;
        // The median heuristic gives lengthscales near 20 here, smooth enough
        // that the GP ignores most of the noisy outer ring by itself.
        model.rff.median_lengthscale = false;
        model.rff.lengthscale = 6.0;
        Self {
            circles: CirclesSpec {
                n_per_class: 100,
                ..Default::default()
            },
            test_n_per_class: 1000,
            model,
        }
    }
}

/// Shared small-scale architecture and schedule for the synthetic suite.
pub fn bench_model(num_classes: usize) -> ModelConfig {
    ModelConfig {
        features: FeatureExtractorConfig {
            hidden_dim: 64,
            output_dim: 64,
            num_residual_blocks: 2,
            activation: Activation::Relu,
            ..Default::default()
        },
        rff: RffConfig {
            num_features: 256,
            median_lengthscale: true,
            ..Default::default()
        },
        het: HetHeadConfig {
            num_classes,
            rank: 2.min(num_classes),
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 300,
            batch_size: 32,
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        },
        predict: PredictConfig {
            mc_samples: 100,
            ..Default::default()
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: VariantKind,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean; 0 for a single seed.
    pub stderr: f64,
}

impl VariantSummary {
    pub fn new(variant: VariantKind, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let stderr = if accuracies.len() > 1 {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            variant,
            accuracies,
            mean,
            stderr,
        }
    }
}

/// Train and test sets for benchmark seed `seed`.
pub fn label_noise_data(bench: &LabelNoiseBench, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = data::noisy_concentric_circles(&CirclesSpec {
        seed,
        ..bench.circles.clone()
    })?;
    let test = data::noisy_concentric_circles(&CirclesSpec {
        seed: seed + TEST_SEED_OFFSET,
        n_per_class: bench.test_n_per_class,
        ..bench.circles.clone()
    })?;
    Ok((train, test))
}

/// One variant trained with benchmark seed `seed`, with its clean test set.
pub fn label_noise_model(bench: &LabelNoiseBench, variant: VariantKind, seed: u64) -> Result<(HetSngpModel, Dataset)> {
    let (train, test) = label_noise_data(bench, seed)?;
    let mut cfg = bench.model.clone();
    cfg.train.seed = seed;
    let dims = ModelDims {
        input_dim: 2,
        num_classes: 3,
    };
    let mut model = build_variant(variant, dims, &cfg)?;
    model.fit(&train)?;
    Ok((model, test))
}

/// Clean-label accuracy of `model` on `test` with `samples` MC draws.
pub fn clean_accuracy(model: &HetSngpModel, test: &Dataset, samples: usize) -> Result<f64> {
    let mut rng = model.prediction_rng();
    let probs = model.predict_proba(&test.x, samples, &mut rng)?;
    accuracy(&probs, test.clean_labels())
}

/// Clean-label test accuracy of one variant trained with benchmark seed `seed`.
pub fn label_noise_accuracy(bench: &LabelNoiseBench, variant: VariantKind, seed: u64) -> Result<f64> {
    let (model, test) = label_noise_model(bench, variant, seed)?;
    clean_accuracy(&model, &test, bench.model.predict.mc_samples)
}

/// Mean ± stderr clean-label accuracy per variant over seeds `0..seed_count`.
pub fn run_label_noise(bench: &LabelNoiseBench, variants: &[VariantKind], seed_count: usize) -> Result<Vec<VariantSummary>> {
    variants
        .iter()
        .map(|&v| {
            let accs = (0..seed_count as u64)
                .map(|s| label_noise_accuracy(bench, v, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(VariantSummary::new(v, accs))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodBench {
    pub mixture: MixtureSpec,
    pub moons_n: usize,
    pub moons_noise_sd: f64,
    /// Far-field probes for two moons sit on a ring of this radius around
    /// the data centre.
    pub moons_probe_radius: f64,
    pub moons_probe_n: usize,
    /// Panels are repeated for this many consecutive seeds.
    pub seeds: usize,
    pub model: ModelConfig,
}

impl Default for OodBench {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec::default(),
            moons_n: 600,
            moons_noise_sd: 0.1,
            moons_probe_radius: 6.0,
            moons_probe_n: 200,
            seeds: 3,
            model: bench_model(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodPanel {
    pub dataset: String,
    pub variant: VariantKind,
    pub id_accuracy: f64,
    pub report: OodReport,
}

/// Points on a circle of `radius` around `center`.
pub fn ring_probes(center: (f64, f64), radius: f64, n: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    let mut out = Matrix::zeros(n, 2);
    for r in 0..n {
        let a = rng.uniform(0.0, TAU);
        out[(r, 0)] = center.0 + radius * a.cos();
        out[(r, 1)] = center.1 + radius * a.sin();
    }
    out
}

fn panel(
    name: &str,
    variant: VariantKind,
    train: &Dataset,
    id_test: &Dataset,
    ood_x: &Matrix,
    config: &ModelConfig,
) -> Result<OodPanel> {
    let mut cfg = config.clone();
    cfg.het.num_classes = train.num_classes;
    cfg.het.rank = cfg.het.rank.min(train.num_classes);
    let dims = ModelDims {
        input_dim: train.dim(),
        num_classes: train.num_classes,
    };
    // Same preprocessing as `train`: statistics of the training split.
    let scaler = Standardizer::fit(&train.x)?;
    let mut model = build_variant(variant, dims, &cfg)?;
    model.fit(&scaler.transform_dataset(train)?)?;
    let samples = cfg.predict.mc_samples;
    let mut rng = model.prediction_rng();
    let id_probs = model.predict_proba(&scaler.transform(&id_test.x)?, samples, &mut rng)?;
    let ood_probs = model.predict_proba(&scaler.transform(ood_x)?, samples, &mut rng)?;
    Ok(OodPanel {
        dataset: name.to_string(),
        variant,
        id_accuracy: accuracy(&id_probs, &id_test.y)?,
        report: OodReport::from_uncertainty(&uncertainty_from_probs(&id_probs), &uncertainty_from_probs(&ood_probs))?,
    })
}

/// Mixture panels: ID test split against the far OOD cluster.
pub fn mixture_panels(bench: &OodBench, variants: &[VariantKind], seed: u64) -> Result<Vec<OodPanel>> {
    let mut cfg = bench.model.clone();
    cfg.train.seed = seed;
    let mixture = data::gaussian_mixture_with_ood(&MixtureSpec {
        seed,
        ..bench.mixture.clone()
    })?;
    let (train, test) = data::split(&mixture, (0.8, 0.2), seed)?;
    let (id_test, ood) = (test.in_distribution(), test.out_of_distribution());
    variants
        .iter()
        .map(|&v| panel("gaussian_mixture", v, &train, &id_test, &ood.x, &cfg))
        .collect()
}

/// Two-moons panels: ID test split against far-field ring probes.
pub fn moons_panels(bench: &OodBench, variants: &[VariantKind], seed: u64) -> Result<Vec<OodPanel>> {
    let mut cfg = bench.model.clone();
    cfg.train.seed = seed;
    cfg.het.num_classes = 2;
    let moons = data::two_moons(bench.moons_n, bench.moons_noise_sd, seed)?;
    let (train, test) = data::split(&moons, (0.8, 0.2), seed)?;
    let probes = ring_probes((0.5, 0.25), bench.moons_probe_radius, bench.moons_probe_n, seed + TEST_SEED_OFFSET);
    variants
        .iter()
        .map(|&v| panel("two_moons", v, &train, &test, &probes, &cfg))
        .collect()
}

/// Panels for seeds `first_seed..first_seed + bench.seeds`, mixture first.
pub fn run_ood_panels(bench: &OodBench, variants: &[VariantKind], first_seed: u64) -> Result<Vec<OodPanel>> {
    let seeds = first_seed..first_seed + bench.seeds as u64;
    let mut out = Vec::new();
    for seed in seeds.clone() {
        out.extend(mixture_panels(bench, variants, seed)?);
    }
    for seed in seeds {
        out.extend(moons_panels(bench, variants, seed)?);
    }
    Ok(out)
}

/// Per-(dataset, variant) means of panel metrics, in first-seen order.
pub fn mean_panels(panels: &[OodPanel]) -> Vec<OodPanel> {
    let mut keys: Vec<(String, VariantKind)> = Vec::new();
    for p in panels {
        if !keys.iter().any(|(d, v)| *d == p.dataset && *v == p.variant) {
            keys.push((p.dataset.clone(), p.variant));
        }
    }
    keys.into_iter()
        .map(|(dataset, variant)| {
            let group: Vec<&OodPanel> = panels
                .iter()
                .filter(|p| p.dataset == dataset && p.variant == variant)
                .collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&OodPanel) -> f64| group.iter().map(|p| f(p)).sum::<f64>() / n;
            OodPanel {
                id_accuracy: mean(&|p| p.id_accuracy),
                report: OodReport {
                    n_id: group.iter().map(|p| p.report.n_id).sum(),
                    n_ood: group.iter().map(|p| p.report.n_ood).sum(),
                    auroc: mean(&|p| p.report.auroc),
                    fpr_at_95: mean(&|p| p.report.fpr_at_95),
                    mean_ood_confidence: mean(&|p| p.report.mean_ood_confidence),
                },
                dataset,
                variant,
            }
        })
        .collect()
}
