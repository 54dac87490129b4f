//! Retinal vessel segmentation: local histogram equalization, 2-D Morlet
//! wavelet features and a Bayesian classifier with Gaussian-mixture class
//! likelihoods, followed by morphological cleanup and pixel-level metrics.

pub mod app;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod morlet;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod raster;

pub use error::{Error, Result};
