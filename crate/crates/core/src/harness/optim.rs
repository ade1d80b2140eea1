use indexmap::IndexMap;

use super::OptimizerKind;
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// First-order update rule holding its own per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, moments: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ModelParams, grads: &IndexMap<String, Tensor>) {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, g) in grads {
            let p = params.tensor_mut(name).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g.data()) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
                    for i in 0..p.len() {
                        let g = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_vec(&[1], vec![v]), true);
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        let grads = IndexMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![3.0]))]);
        opt.step(&mut p, &grads);
        // Bias-corrected m/sqrt(v) = g/|g| on the first step.
        assert!((p.tensor("w").data()[0] - (1.0 - 0.01 * 3.0 / (3.0 + ADAM_EPS))).abs() < 1e-15);
    }

    #[test]
    fn sgd_step() {
        let mut p = single(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        let grads = IndexMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![2.0]))]);
        opt.step(&mut p, &grads);
        assert_eq!(p.tensor("w").data()[0], 0.0);
    }
}
