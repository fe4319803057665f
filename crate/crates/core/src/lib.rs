//! Spectral-normalized residual networks with a random-Fourier-feature
//! Gaussian-process output layer and low-rank heteroscedastic logit noise.
//!
//! The four model families share one implementation and differ only in
//! which components are switched on:
//!
//! | variant           | spectral norm | output layer | logit noise |
//! |-------------------|---------------|--------------|-------------|
//! | `deterministic`   | off           | affine       | none        |
//! | `sngp`            | on            | RFF GP       | none        |
//! | `heteroscedastic` | off           | affine       | low-rank    |
//! | `hetsngp`         | on            | RFF GP       | low-rank    |

pub mod cli;
pub mod data;
pub mod dense;
pub mod error;
pub mod feature_net;
pub mod het_noise;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rff_gp;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
pub use model::{build_variant, ensemble_predict, HetSngpModel, ModelConfig, ModelDims, VariantKind};
