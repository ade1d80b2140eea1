//! Soft Dice plus binary cross-entropy on per-voxel logits.

use std::rc::Rc;

use super::{HarnessError, LossWeights, Result};
use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-5;

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value and its gradient with respect to each logit. Dice is pooled
/// over every voxel of the batch; cross-entropy is the voxel mean.
pub fn loss_and_grad(logits: &[f64], target: &[f64], w: LossWeights) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let inter: f64 = p.iter().zip(target).map(|(p, g)| p * g).sum();
    let union: f64 = p.iter().sum::<f64>() + target.iter().sum::<f64>();
    let den = union + DICE_SMOOTH;
    let dice = (2.0 * inter + DICE_SMOOTH) / den;
    let ce: f64 = logits.iter().zip(target).map(|(&x, &g)| softplus(x) - x * g).sum::<f64>() / n;
    let value = w.dice * (1.0 - dice) + w.ce * ce;
    let grad = p
        .iter()
        .zip(logits.iter().zip(target))
        .map(|(&p, (_, &g))| {
            let d_dice_dp = (2.0 * g * den - (2.0 * inter + DICE_SMOOTH)) / (den * den);
            -w.dice * d_dice_dp * p * (1.0 - p) + w.ce * (p - g) / n
        })
        .collect();
    (value, grad)
}

/// Scalar loss node for `logits` of shape `[B, 1, ...]` against a binary
/// target with the same number of elements.
pub fn compound_loss(g: &mut Graph, logits: Var, target: Rc<Vec<f64>>, w: LossWeights) -> Result<Var> {
    let len = g.value(logits).len();
    if len != target.len() {
        return Err(HarnessError::ShapeMismatch(format!(
            "logits {:?} hold {len} values, target holds {}",
            g.shape(logits),
            target.len()
        )));
    }
    let (value, grad) = loss_and_grad(g.value(logits).data(), &target, w);
    let shape = g.shape(logits).to_vec();
    let grad = Rc::new(grad);
    Ok(g.op(Tensor::scalar(value), &[logits], move |up| {
        let s = up.item();
        vec![Some(Tensor::from_vec(&shape, grad.iter().map(|d| d * s).collect()))]
    }))
}

pub fn compound_loss_value(logits: &Tensor, target: &[f64], w: LossWeights) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(HarnessError::ShapeMismatch(format!("{} logits vs {} targets", logits.len(), target.len())));
    }
    Ok(loss_and_grad(logits.data(), target, w).0)
}
