use serde::{Deserialize, Serialize};

use super::train::{evaluate, preprocess_dataset, train};
use super::{config_diff, HarnessError, Result, TrainConfig};
use crate::metrics::MetricsReport;
use crate::preprocess::PipelineMode;
use crate::synth::{split_dataset, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Transformer branch on versus off.
    SwinGce,
    /// Comprehensive versus basic preprocessing.
    Preprocessing,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "swin_gce" => Ok(Self::SwinGce),
            "preprocessing" => Ok(Self::Preprocessing),
            _ => Err(format!("unknown ablation axis {s:?} (expected swin_gce or preprocessing)")),
        }
    }
}

impl AblationAxis {
    /// The full configuration and its ablated partner.
    pub fn pair(&self, base: &TrainConfig) -> (TrainConfig, TrainConfig) {
        let mut full = base.clone();
        let mut ablated = base.clone();
        match self {
            Self::SwinGce => {
                full.model.use_swin_gce = true;
                ablated.model.use_swin_gce = false;
            }
            Self::Preprocessing => {
                full.pipeline.mode = PipelineMode::Comprehensive;
                ablated.pipeline.mode = PipelineMode::Basic;
            }
        }
        (full, ablated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub seed: u64,
    /// The single config field the two runs differ in.
    pub differing_field: String,
    pub full: MetricsReport,
    pub ablated: MetricsReport,
    pub delta_dsc: f64,
    pub delta_hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub axis: AblationAxis,
    pub pairs: Vec<AblationPair>,
    pub mean_dsc_full: f64,
    pub mean_dsc_ablated: f64,
    pub mean_delta_dsc: f64,
    /// Mean over the seeds where both runs have a defined HD95.
    pub mean_delta_hd95: Option<f64>,
    pub training_runs: usize,
}

/// Trains matched pairs on `raw` (split by `base.split_seed` and preprocessed
/// with each run's own pipeline), one pair per seed, and reports `full - ablated`.
pub fn run_ablation(base: &TrainConfig, axis: AblationAxis, seeds: &[u64], raw: &Dataset) -> Result<AblationSummary> {
    if seeds.is_empty() {
        return Err(HarnessError::InvalidConfig("ablation needs at least one seed".into()));
    }
    let (train_raw, test_raw) = split_dataset(raw, base.train_fraction, base.split_seed)?;
    let (full_base, ablated_base) = axis.pair(base);
    let prepare = |cfg: &TrainConfig| -> Result<(Dataset, Dataset)> {
        Ok((preprocess_dataset(&train_raw, &cfg.pipeline)?, preprocess_dataset(&test_raw, &cfg.pipeline)?))
    };
    let data_full = prepare(&full_base)?;
    let data_ablated = if full_base.pipeline == ablated_base.pipeline { None } else { Some(prepare(&ablated_base)?) };
    let mut pairs = Vec::with_capacity(seeds.len());
    let mut runs = 0;
    for &seed in seeds {
        let full = TrainConfig { seed, ..full_base.clone() };
        let ablated = TrainConfig { seed, ..ablated_base.clone() };
        let diff = config_diff(&full, &ablated);
        if diff.len() != 1 {
            return Err(HarnessError::InvalidConfig(format!("ablation pair differs in {diff:?}")));
        }
        let run = |cfg: &TrainConfig, data: &(Dataset, Dataset)| -> Result<MetricsReport> {
            let (params, _) = train(cfg, &data.0, &data.1)?;
            evaluate(&params, &cfg.model, &data.1)
        };
        let r_full = run(&full, &data_full)?;
        let r_ablated = run(&ablated, data_ablated.as_ref().unwrap_or(&data_full))?;
        runs += 2;
        let dsc = |r: &MetricsReport| r.mean_dsc().unwrap_or(0.0);
        let delta_hd95 = r_full.mean_hd95().zip(r_ablated.mean_hd95()).map(|(a, b)| a - b);
        pairs.push(AblationPair {
            seed,
            differing_field: diff.into_iter().next().expect("one field"),
            delta_dsc: dsc(&r_full) - dsc(&r_ablated),
            delta_hd95,
            full: r_full,
            ablated: r_ablated,
        });
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&AblationPair) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let hd: Vec<f64> = pairs.iter().filter_map(|p| p.delta_hd95).collect();
    Ok(AblationSummary {
        axis,
        mean_dsc_full: mean(&|p| p.full.mean_dsc().unwrap_or(0.0)),
        mean_dsc_ablated: mean(&|p| p.ablated.mean_dsc().unwrap_or(0.0)),
        mean_delta_dsc: mean(&|p| p.delta_dsc),
        mean_delta_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
        training_runs: runs,
        pairs,
    })
}
