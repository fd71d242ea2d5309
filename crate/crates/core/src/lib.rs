//! Image-based mean-variance regression for compressed body MRI.
//!
//! The pipeline turns two-channel (water/fat) volumes into 2D projection
//! tiles, trains a small convolutional network that emits a Gaussian mean
//! and log-variance per target, rescales the predicted variances on held-out
//! data, and reports agreement metrics. A parametric phantom generator
//! supplies volumes whose targets are analytic functions of the image.
//!
//! Module map:
//! - [`phantom`]: synthetic subjects and label export
//! - [`projection`]: volume to tile compression and resampling
//! - [`dataset`]: target registry, labels, folds, normalization, batching
//! - [`model`]: the convolutional backbone with analytic gradients
//! - [`training`]: masked Gaussian NLL, Adam, and the two-stage loop
//! - [`uncertainty`]: variance calibration, intervals, coverage
//! - [`metrics`]: ICC(2,1), R², MAE/MAPE, AUC-ROC, confusion rates
//! - [`checkpoint`] and [`inference`]: persistence and batch prediction

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod projection;
pub mod training;
pub mod uncertainty;
pub mod volume;

pub use error::{MimirError, Result};
