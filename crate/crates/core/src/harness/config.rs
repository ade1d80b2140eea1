use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::model::ModelConfig;
use crate::preprocess::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with betas (0.9, 0.999) and eps 1e-8.
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 1.0, ce: 1.0 }
    }
}

/// Everything a training run depends on. Read from and echoed as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    /// Drives initialisation, batch order, dropout and augmentation.
    pub seed: u64,
    pub eval_every: usize,
    /// Random flips and affine warps of training subjects, redrawn every epoch.
    pub augment: bool,
    /// Used when a single dataset is split into train and test parts.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss_weights: LossWeights::default(),
            seed: 0,
            eval_every: 1,
            augment: false,
            train_fraction: 0.8,
            split_seed: 0,
            model: ModelConfig::toy(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size network, 160³ inputs and 100 epochs.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            model: ModelConfig::full_scale(),
            pipeline: PipelineConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        let w = self.loss_weights;
        if !(w.dice >= 0.0 && w.ce >= 0.0) || w.dice + w.ce == 0.0 {
            return bad("loss weights must be non-negative and not both zero".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        self.model.validate()?;
        self.pipeline.validate()?;
        let d = self.model.spatial_divisor();
        if self.pipeline.target_shape.iter().any(|n| n % d != 0) {
            return bad(format!("target_shape {:?} is not a multiple of {d}", self.pipeline.target_shape));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Dotted paths of every leaf field whose value differs between two configs.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&path, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let to = |c: &TrainConfig| serde_json::to_value(c).expect("config serialises");
    let mut out = Vec::new();
    walk("", &to(a), &to(b), &mut out);
    out
}
