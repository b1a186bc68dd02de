//! Regression-augmented variational autoencoder over interpretable cardiac
//! biomarkers, with the surrounding pipeline: biomarker extraction from
//! volume curves, quality control, synthetic cohort generation, linear and
//! forest baselines, cross-validated training, and latent-space analyses.

pub mod analysis;
pub mod baselines;
pub mod biomarkers;
pub mod cohort;
pub mod error;
pub mod numerics;
pub mod rvae;
pub mod training;

pub use error::{Error, Result};
