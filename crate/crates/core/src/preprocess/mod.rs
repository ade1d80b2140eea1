//! Image preparation: resampling, bias-field correction, min-max scaling,
//! resizing and augmentation, chained by [`run_pipeline`].

mod augment;
mod bias;
mod interp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{apply_draw, augment, flip_axis, AugmentDraw, AugmentationConfig};
pub use bias::{bias_field_correct, gaussian_smooth, reflect, BiasCorrection, BiasCorrectionConfig};
pub use interp::{resample, resampled_shape, resize, round_half_away, sample, Boundary, Interpolation};

use crate::volume::{replace_nans_with_zero, Mask, Subject, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("stage {stage}: {source}")]
    Stage { stage: Stage, source: Box<PreprocessError> },
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    /// Every stage.
    Comprehensive,
    /// NaN scrubbing, min-max scaling and resizing only.
    Basic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReplaceNans,
    Resample,
    BiasFieldCorrect,
    NormalizeIntensity,
    Resize,
    Augment,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::ReplaceNans => "replace_nans_with_zero",
            Stage::Resample => "resample",
            Stage::BiasFieldCorrect => "bias_field_correct",
            Stage::NormalizeIntensity => "normalize_intensity",
            Stage::Resize => "resize",
            Stage::Augment => "augment",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub target_spacing: [f64; 3],
    pub target_shape: [usize; 3],
    pub bias_correction: BiasCorrectionConfig,
    pub augmentation: AugmentationConfig,
    pub augment_enabled: bool,
    /// Seed for the augmentation draw inside the pipeline.
    pub augment_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Comprehensive,
            target_spacing: [1.0; 3],
            target_shape: [32; 3],
            bias_correction: BiasCorrectionConfig::default(),
            augmentation: AugmentationConfig::default(),
            augment_enabled: false,
            augment_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn full_scale() -> Self {
        Self { target_shape: [160; 3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_shape.iter().any(|&n| n < 8) {
            return Err(PreprocessError::InvalidConfig(format!("target_shape {:?} has a side below 8", self.target_shape)));
        }
        if self.target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(PreprocessError::InvalidConfig(format!("target_spacing {:?} must be positive", self.target_spacing)));
        }
        self.bias_correction.validate()?;
        self.augmentation.validate()
    }

    /// Stages run for this configuration, in order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = match self.mode {
            PipelineMode::Comprehensive => {
                vec![Stage::ReplaceNans, Stage::Resample, Stage::BiasFieldCorrect, Stage::NormalizeIntensity, Stage::Resize]
            }
            PipelineMode::Basic => vec![Stage::ReplaceNans, Stage::NormalizeIntensity, Stage::Resize],
        };
        if self.augment_enabled {
            s.push(Stage::Augment);
        }
        s
    }
}

/// `(v - min) / (max - min)`; a constant image maps to zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    match v.min_max() {
        Some((lo, hi)) if hi > lo => {
            let range = hi - lo;
            v.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
        }
        _ => v.map(|_| 0.0),
    }
}

/// One line of the stage trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub min: f64,
    pub max: f64,
}

impl StageRecord {
    fn of(stage: Stage, v: &Volume) -> Self {
        let (min, max) = v.min_max().unwrap_or((f64::NAN, f64::NAN));
        Self { stage, shape: v.shape(), spacing: v.geom.spacing, min, max }
    }
}

/// Serialises a trace as JSON lines.
pub fn trace_to_json_lines(trace: &[StageRecord]) -> String {
    trace.iter().map(|r| serde_json::to_string(r).expect("trace serialises") + "\n").collect()
}

fn mask_geometric(m: &Mask, f: impl Fn(&Volume) -> Result<Volume>) -> Result<Mask> {
    Ok(Mask::from_volume(&f(&m.to_volume())?)?)
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| PreprocessError::Stage { stage, source: Box::new(e) })
}

pub fn run_pipeline(s: &Subject, cfg: &PipelineConfig) -> Result<Subject> {
    run_pipeline_traced(s, cfg).map(|(s, _)| s)
}

/// Runs the configured stages, returning the processed subject and one record
/// per stage. Masks follow the geometric stages with nearest interpolation.
pub fn run_pipeline_traced(s: &Subject, cfg: &PipelineConfig) -> Result<(Subject, Vec<StageRecord>)> {
    cfg.validate()?;
    let mut image = s.image.clone();
    let mut mask = s.mask.clone();
    let mut trace = Vec::new();
    for stage in cfg.stages() {
        let mut step = || -> Result<()> {
            match stage {
                Stage::ReplaceNans => image = replace_nans_with_zero(&image),
                Stage::Resample => {
                    image = resample(&image, cfg.target_spacing, Interpolation::Linear)?;
                    if let Some(m) = &mask {
                        mask = Some(mask_geometric(m, |v| resample(v, cfg.target_spacing, Interpolation::Nearest))?);
                    }
                }
                Stage::BiasFieldCorrect => {
                    let lo = image.min_max().map_or(0.0, |(lo, _)| lo);
                    if lo < 0.0 {
                        image = image.map(|x| x - lo);
                    }
                    image = bias_field_correct(&image, &cfg.bias_correction)?.corrected;
                }
                Stage::NormalizeIntensity => image = normalize_intensity(&image),
                Stage::Resize => {
                    image = resize(&image, cfg.target_shape, Interpolation::Linear)?;
                    if let Some(m) = &mask {
                        mask = Some(mask_geometric(m, |v| resize(v, cfg.target_shape, Interpolation::Nearest))?);
                    }
                }
                Stage::Augment => {
                    let m = mask.clone().unwrap_or_else(|| Mask::empty(image.geom));
                    let (a, b) = augment(&image, &m, &cfg.augmentation, cfg.augment_seed)?;
                    image = a;
                    if mask.is_some() {
                        mask = Some(b);
                    }
                }
            }
            Ok(())
        };
        in_stage(stage, step())?;
        trace.push(StageRecord::of(stage, &image));
    }
    let out = Subject::new(s.id.clone(), image, mask)?;
    Ok((out, trace))
}
