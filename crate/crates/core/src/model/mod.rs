//! Hybrid segmentation network: a residual convolutional encoder-decoder,
//! a shifted-window transformer branch fed by its output, channel fusion and
//! a convolutional head producing one foreground logit per voxel.

mod checkpoint;
mod config;
mod context;
mod net;
mod params;
mod swin;
mod unet;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, SwinConfig};
pub use context::{apply_batch_stats, Forward, Mode, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use net::{forward, fuse_features, infer, segmentation_head};
pub use params::{count_parameters, Builder, ModelParams, Param, PRELU_INIT_SLOPE};
pub use swin::{
    relative_position_index, sw_msa, sw_msa_weights, swin_block, swin_gce_forward, window_partition, window_reverse,
    WindowLayout,
};
pub use unet::{residual_conv_block, unet_sed_forward};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {shape:?} is not [batch, {channels}, x, y, z]")]
    InputShape { shape: Vec<usize>, channels: usize },
    #[error("spatial dims {dims:?} are not multiples of {divisor}")]
    IndivisibleInput { dims: [usize; 3], divisor: usize },
    #[error("non-finite values entering {stage}")]
    NonFinite { stage: String },
    #[error("{stage}: expected {expected} channels, got {actual}")]
    ChannelMismatch { stage: String, expected: usize, actual: usize },
    #[error("feature maps differ in batch or spatial dims: {left:?} vs {right:?}")]
    SpatialMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<ModelError> },
    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
