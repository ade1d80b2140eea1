//! Loss, optimisation, training and evaluation loops, ablations, run
//! directories and reporting.

mod ablation;
mod config;
mod loss;
mod optim;
mod report;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use ablation::{run_ablation, AblationAxis, AblationPair, AblationSummary};
pub use config::{config_diff, LossWeights, OptimizerKind, TrainConfig};
pub use loss::{compound_loss, compound_loss_value, loss_and_grad, DICE_SMOOTH};
pub use optim::{Optimizer, ADAM_BETAS, ADAM_EPS};
pub use report::{
    comparison_table, overlay_image, plot_history, report, save_overlay, ComparisonRow, ReportFiles, PUBLISHED_DSC,
    RUN_ROW_NAME,
};
pub use train::{
    derive_seed, evaluate, evaluate_with_loss, logits, predict, preprocess_dataset, train, train_observed,
    volume_tensor, EpochRecord, TrainingHistory,
};

use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{save_checkpoint, ModelError, ModelParams};
use crate::preprocess::PreprocessError;
use crate::synth::SynthError;
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("subject {0} has no mask")]
    MissingMask(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// SHA-256 over the library sources this binary was built from.
pub const CODE_HASH: &str = env!("STROKESEG_CODE_HASH");

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Writes everything needed to reproduce and inspect a run: config echo,
/// seed, code hash, history, metrics and the checkpoint.
pub fn write_run_dir(
    dir: &Path,
    cfg: &TrainConfig,
    params: &ModelParams,
    history: &TrainingHistory,
    metrics: &MetricsReport,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))
    };
    write(CONFIG_FILE, cfg.to_toml())?;
    write("seed.txt", format!("{}\n", cfg.seed))?;
    write("code_hash.txt", format!("{CODE_HASH}\n"))?;
    write(HISTORY_FILE, serde_json::to_string_pretty(history).expect("history serialises"))?;
    write("params_checksum.txt", format!("{}\n", params.checksum()))?;
    metrics.save(dir)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &cfg.model, params)?;
    Ok(())
}

pub fn load_history(path: &Path) -> Result<TrainingHistory> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

pub fn load_metrics(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}
