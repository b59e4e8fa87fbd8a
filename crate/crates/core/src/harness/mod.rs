//! Experiment plumbing: synthetic data, image metrics, PCA, file formats,
//! configuration and run manifests.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod pca;

pub use config::{LabelMode, RunConfig};
pub use dataset::{generate_dataset, Dataset, SyntheticDatasetSpec, CLASS_NAMES};
pub use experiment::{fresh_params, Experiment};
pub use manifest::{content_hash, Manifest, MANIFEST_FILE};
pub use metrics::{psnr, quality, ssim, Psnr, QualityReport, PSNR_CAP_DB};
pub use pca::{pca_project, Projection2D};
