use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ModelParams;
use crate::autograd::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// State of one forward evaluation: the graph, parameter leaves, dropout RNG
/// and batch-norm statistics gathered on the way.
pub struct Forward<'p> {
    pub graph: Graph,
    params: &'p ModelParams,
    vars: HashMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    dropout: bool,
    bn_stats: Vec<(String, BatchStats)>,
    shifts: Vec<usize>,
}

impl<'p> Forward<'p> {
    /// Training-mode forward recording gradients; `seed` drives dropout.
    pub fn train(params: &'p ModelParams, seed: u64) -> Self {
        Self::with_graph(params, Mode::Train, Graph::new(), seed)
    }

    /// Evaluation-mode forward without gradient bookkeeping.
    pub fn eval(params: &'p ModelParams) -> Self {
        Self::with_graph(params, Mode::Eval, Graph::inference(), 0)
    }

    pub fn with_graph(params: &'p ModelParams, mode: Mode, graph: Graph, seed: u64) -> Self {
        Self {
            graph,
            params,
            vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout: mode == Mode::Train,
            bn_stats: Vec::new(),
            shifts: Vec::new(),
        }
    }

    /// Keeps training-mode normalisation but skips dropout, which makes the
    /// forward a deterministic function of parameters and input.
    pub fn without_dropout(mut self) -> Self {
        self.dropout = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Graph node for a named parameter, created on first use. Panics when
    /// the parameter does not exist.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let p = self.params.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        let v = if p.trainable { self.graph.leaf(p.tensor.clone()) } else { self.graph.constant(p.tensor.clone()) };
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.graph.shape(v).to_vec()
    }

    /// Inverted dropout; identity outside training or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.dropout || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.graph.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.graph.apply_mask(x, Rc::new(mask))
    }

    /// Batch norm named `prefix` using batch or running statistics by mode.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, gamma, beta, None, BN_EPS);
                self.bn_stats.push((prefix.to_string(), stats.expect("batch statistics")));
                y
            }
            Mode::Eval => {
                let params = self.params;
                let mean = params.tensor(&format!("{prefix}.running_mean")).data();
                let var = params.tensor(&format!("{prefix}.running_var")).data();
                self.graph.batch_norm(x, gamma, beta, Some((mean, var)), BN_EPS).0
            }
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        self.graph.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// `x W^T + b` over the last dimension.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        self.graph.linear(x, w, Some(b))
    }

    /// Convolution (any odd cubic kernel) or channel mix, bias if present.
    pub fn conv(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let bias_name = format!("{prefix}.bias");
        let b = self.has_param(&bias_name).then(|| self.param(&bias_name));
        if self.graph.shape(w).len() == 2 {
            self.graph.channel_mix(x, w, b)
        } else {
            self.graph.conv3d(x, w, b)
        }
    }

    pub(crate) fn record_shift(&mut self, shift: usize) {
        self.shifts.push(shift);
    }

    /// Window shifts used by the transformer blocks, in call order.
    pub fn shifts(&self) -> &[usize] {
        &self.shifts
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.bn_stats
    }

    /// Gradients of `loss` keyed by parameter name (trainable ones only).
    pub fn gradients(&self, loss: Var) -> IndexMap<String, Tensor> {
        let mut grads = self.graph.backward(loss);
        let mut out = IndexMap::new();
        for name in self.params.names() {
            if let Some(&v) = self.vars.get(name) {
                if let Some(g) = grads.take(v) {
                    out.insert(name.to_string(), g);
                }
            }
        }
        out
    }
}

/// Moves running statistics towards the batch statistics of a training step.
pub fn apply_batch_stats(params: &mut ModelParams, stats: &[(String, BatchStats)]) {
    for (prefix, s) in stats {
        let mean = params.tensor_mut(&format!("{prefix}.running_mean"));
        for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let var = params.tensor_mut(&format!("{prefix}.running_var"));
        for (r, b) in var.data_mut().iter_mut().zip(&s.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}
