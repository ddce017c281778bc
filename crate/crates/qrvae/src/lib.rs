//! Quantile-regression variational autoencoders (QR-VAE).
//!
//! A Gaussian-output VAE trained by maximum likelihood jointly learns a
//! per-pixel mean and variance; when the mean network reconstructs well,
//! the likelihood pushes the learned variance toward zero. This crate
//! implements both that classical VAE and a quantile-regression variant
//! whose decoder predicts two conditional quantiles with the pinball loss.
//! Under a Gaussian output assumption the two quantiles map one-to-one to a
//! mean and a standard deviation, which gives calibrated per-pixel
//! uncertainty and, from it, z-scores, p-values and FDR-controlled anomaly
//! masks.
//!
//! Module map:
//! - [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`nn`]: dense / conv / deconv / batchnorm layers and `Sequential`.
//! - [`data`]: two-moons simulation, IDX image files, synthetic lesion
//!   benchmark, deterministic splits.
//! - [`models`]: the VAE and QR-VAE models and all loss terms.
//! - [`trainer`]: Adam loop, training logs, checkpoints.
//! - [`stats`]: normal CDF/quantile, quantile-to-Gaussian mapping, KDE,
//!   k-NN KL estimator, BH-FDR, ROC AUC, median filter.
//! - [`config`]: TOML experiment and dataset configuration.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
