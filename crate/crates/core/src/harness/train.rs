use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{compound_loss, compound_loss_value};
use super::optim::Optimizer;
use super::{HarnessError, LossWeights, Result, TrainConfig};
use crate::metrics::{evaluate_case, CaseRow, MetricsReport};
use crate::model::{apply_batch_stats, forward, infer, Forward, ModelConfig, ModelParams};
use crate::preprocess::{augment, run_pipeline, PipelineConfig};
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::volume::{Mask, Subject, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Evaluation fields are `None` on epochs without evaluation; `test_hd95`
    /// is also `None` when no test case has a defined distance.
    pub test_loss: Option<f64>,
    pub test_dsc: Option<f64>,
    pub test_hd95: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best_dsc(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.test_dsc).reduce(f64::max)
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_DROPOUT: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

/// `[1, 1, nz, ny, nx]`; volume storage is already x-fastest.
pub fn volume_tensor(v: &Volume) -> Tensor {
    let [nx, ny, nz] = v.shape();
    Tensor::from_vec(&[1, 1, nz, ny, nx], v.data.clone())
}

fn mask_of(s: &Subject) -> Result<&Mask> {
    s.mask.as_ref().ok_or_else(|| HarnessError::MissingMask(s.id.clone()))
}

fn stack(subjects: &[Subject]) -> Result<(Tensor, Vec<f64>)> {
    let [nx, ny, nz] = subjects[0].image.shape();
    let mut data = Vec::with_capacity(subjects.len() * nx * ny * nz);
    let mut target = Vec::with_capacity(data.capacity());
    for s in subjects {
        if s.image.shape() != [nx, ny, nz] {
            return Err(HarnessError::ShapeMismatch(format!("{} has shape {:?}, expected {:?}", s.id, s.image.shape(), [nx, ny, nz])));
        }
        data.extend_from_slice(&s.image.data);
        target.extend(mask_of(s)?.data.iter().map(|&b| b as f64));
    }
    Ok((Tensor::from_vec(&[subjects.len(), 1, nz, ny, nx], data), target))
}

/// Runs the preprocessing pipeline on every subject.
pub fn preprocess_dataset(d: &Dataset, cfg: &PipelineConfig) -> Result<Dataset> {
    let subjects = d.subjects.iter().map(|s| run_pipeline(s, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { subjects, scenarios: d.scenarios.clone(), seeds: d.seeds.clone(), provenance: d.provenance.clone() })
}

/// Trains from a fresh initialisation. Returns the parameters from the
/// evaluation with the highest mean test DSC (the final ones if none beat
/// the first) together with the per-epoch history.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<(ModelParams, TrainingHistory)> {
    train_observed(cfg, train_set, test_set, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_observed(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainingHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(HarnessError::EmptyDataset("training"));
    }
    if test_set.is_empty() {
        return Err(HarnessError::EmptyDataset("test"));
    }
    for s in train_set.subjects.iter().chain(&test_set.subjects) {
        mask_of(s)?;
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let subjects = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set.subjects[i];
                    if !cfg.augment {
                        return Ok(s.clone());
                    }
                    let seed = derive_seed(cfg.seed, STREAM_AUGMENT, (epoch * train_set.len() + i) as u64);
                    let (image, mask) = augment(&s.image, mask_of(s)?, &cfg.pipeline.augmentation, seed)?;
                    Ok(Subject::new(s.id.clone(), image, Some(mask))?)
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, target) = stack(&subjects)?;
            let dropout_seed = derive_seed(cfg.seed, STREAM_DROPOUT, opt.steps());
            let loss = step(&mut params, &mut opt, &cfg.model, cfg.loss_weights, x, target, dropout_seed)?;
            if !loss.is_finite() {
                return Err(HarnessError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += loss;
            batches += 1;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_loss: None,
            test_dsc: None,
            test_hd95: None,
            wall_seconds: 0.0,
        };
        if epoch % cfg.eval_every == 0 {
            let (report, test_loss) = evaluate_with_loss(&params, &cfg.model, test_set, cfg.loss_weights)?;
            record.test_loss = Some(test_loss);
            record.test_dsc = report.mean_dsc();
            record.test_hd95 = report.mean_hd95();
            let dsc = record.test_dsc.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(b, _)| dsc > *b) {
                best = Some((dsc, params.clone()));
            }
        }
        record.wall_seconds = started.elapsed().as_secs_f64();
        on_epoch(&record);
        history.records.push(record);
    }
    Ok((best.map_or(params, |(_, p)| p), history))
}

/// One optimisation step on a stacked batch; returns the loss before the update.
fn step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    model: &ModelConfig,
    weights: LossWeights,
    x: Tensor,
    target: Vec<f64>,
    dropout_seed: u64,
) -> Result<f64> {
    let (loss, grads, stats) = {
        let mut f = Forward::train(params, dropout_seed);
        let xv = f.input(x);
        let logits = forward(&mut f, model, xv)?;
        let loss = compound_loss(&mut f.graph, logits, Rc::new(target), weights)?;
        let value = f.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        (value, f.gradients(loss), f.batch_stats().to_vec())
    };
    apply_batch_stats(params, &stats);
    opt.step(params, &grads);
    Ok(loss)
}

/// Eval-mode logits for one volume.
pub fn logits(params: &ModelParams, model: &ModelConfig, image: &Volume) -> Result<Volume> {
    let y = infer(params, model, volume_tensor(image))?;
    Ok(Volume::new(image.geom, y.into_data())?)
}

/// Foreground where the logistic probability exceeds 0.5, i.e. logit > 0.
pub fn predict(params: &ModelParams, model: &ModelConfig, image: &Volume) -> Result<Mask> {
    Ok(Mask::threshold(&logits(params, model, image)?, 0.0))
}

pub fn evaluate(params: &ModelParams, model: &ModelConfig, d: &Dataset) -> Result<MetricsReport> {
    Ok(evaluate_with_loss(params, model, d, LossWeights::default())?.0)
}

/// Per-case metrics plus the mean per-subject loss.
pub fn evaluate_with_loss(
    params: &ModelParams,
    model: &ModelConfig,
    d: &Dataset,
    weights: LossWeights,
) -> Result<(MetricsReport, f64)> {
    let mut rows = Vec::with_capacity(d.len());
    let mut loss = 0.0;
    for s in &d.subjects {
        let gt = mask_of(s)?;
        let l = logits(params, model, &s.image)?;
        let target: Vec<f64> = gt.data.iter().map(|&b| b as f64).collect();
        loss += compound_loss_value(&volume_tensor(&l), &target, weights)?;
        let pred = Mask::threshold(&l, 0.0);
        rows.push(CaseRow { id: s.id.clone(), metrics: evaluate_case(&pred, gt)? });
    }
    Ok((MetricsReport::new(rows), loss / d.len().max(1) as f64))
}
