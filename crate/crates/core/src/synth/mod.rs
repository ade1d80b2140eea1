//! Synthetic lesion phantoms and dataset utilities.

mod components;
mod dataset;
mod phantom;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use components::{count_components, label_components, Component};
pub use dataset::{
    classify_mask, dataset_statistics, generate_dataset, load_dataset, parse_mix, save_dataset, split_dataset,
    CountClass, Dataset, LesionDistribution, ManifestEntry, MixEntry, Scenario, MANIFEST,
};
pub use phantom::{
    generate_phantom, smooth_bias_field, Hemisphere, PhantomSpec, TissueIntensities, MAX_PLACEMENT_ATTEMPTS,
};

use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("lesion {index} of radius {radius_mm:.2} mm could not be placed")]
    UnplaceableLesion { index: usize, radius_mm: f64 },
    #[error("invalid scenario mix: {0}")]
    InvalidMix(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("subject {0} has no mask")]
    MissingMask(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl SynthError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;
