use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::Result;
use crate::tensor::Tensor;

pub const PRELU_INIT_SLOPE: f64 = 0.25;
const TRUNC_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    /// Running statistics are stored here too but are not optimised.
    pub trainable: bool,
}

/// Named parameter store in a stable insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: IndexMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Randomly initialised parameters for `cfg`, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: Self::new(), rng: Some(&mut rng) };
        build(cfg, &mut b);
        Ok(b.params)
    }

    /// Parameters for `cfg` with every random weight left at zero. Used to
    /// instantiate large presets cheaply.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: Self::new(), rng: None };
        build(cfg, &mut b);
        Ok(b.params)
    }

    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        self.entries.insert(name, Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Panics when `name` is missing.
    pub fn tensor(&self, name: &str) -> &Tensor {
        match self.entries.get(name) {
            Some(p) => &p.tensor,
            None => panic!("no parameter named {name}"),
        }
    }

    /// Panics when `name` is missing.
    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        match self.entries.get_mut(name) {
            Some(p) => &mut p.tensor,
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.all_finite())
    }

    /// SHA-256 over names, shapes and value bits, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Total element count over trainable arrays.
pub fn count_parameters(params: &ModelParams) -> usize {
    params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.len()).sum()
}

/// Adds layer parameters under conventional names. With no RNG the random
/// initialisers produce zeros.
pub struct Builder<'r> {
    pub params: ModelParams,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Builder<'r> {
    pub fn new(rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Self { params: ModelParams::new(), rng }
    }

    fn normal(&mut self, shape: &[usize], std: f64, truncate: bool) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if let Some(rng) = self.rng.as_deref_mut() {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in t.data_mut() {
                *v = loop {
                    let s: f64 = dist.sample(rng);
                    if !truncate || s.abs() <= 2.0 * std {
                        break s;
                    }
                };
            }
        }
        t
    }

    /// Kaiming-normal `[co, ci, k, k, k]` weight and optional zero bias.
    pub fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, bias: bool) {
        let std = (2.0 / (ci * k * k * k) as f64).sqrt();
        let w = self.normal(&[co, ci, k, k, k], std, false);
        self.params.insert(format!("{name}.weight"), w, true);
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[co]), true);
        }
    }

    /// Kaiming-normal `[co, ci]` channel mix (a 1×1×1 or strided patch conv).
    pub fn mix(&mut self, name: &str, co: usize, ci: usize, bias: bool) {
        let w = self.normal(&[co, ci], (2.0 / ci as f64).sqrt(), false);
        self.params.insert(format!("{name}.weight"), w, true);
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[co]), true);
        }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true);
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true);
        self.params.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false);
        self.params.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0), false);
    }

    pub fn prelu(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.slope"), Tensor::full(&[c], PRELU_INIT_SLOPE), true);
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true);
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true);
    }

    /// Truncated-normal `[out, in]` weight with zero bias.
    pub fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let w = self.normal(&[out, inp], TRUNC_STD, true);
        self.params.insert(format!("{name}.weight"), w, true);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out]), true);
    }

    /// Residual conv block `ci -> co` with `convs` convolutions of size `k`.
    pub fn residual_block(&mut self, name: &str, ci: usize, co: usize, k: usize, convs: usize) {
        for i in 0..convs {
            let cin = if i == 0 { ci } else { co };
            self.conv(&format!("{name}.conv{i}"), co, cin, k, true);
            self.batch_norm(&format!("{name}.bn{i}"), co);
            self.prelu(&format!("{name}.prelu{i}"), co);
        }
        if ci != co {
            self.mix(&format!("{name}.proj"), co, ci, false);
        }
    }

    /// One shifted-window transformer block of width `c`.
    pub fn swin_block(&mut self, name: &str, c: usize, heads: usize, window: usize, mlp_ratio: usize) {
        self.layer_norm(&format!("{name}.ln1"), c);
        self.linear(&format!("{name}.attn.qkv"), 3 * c, c);
        let span = 2 * window - 1;
        let table = self.normal(&[span * span * span, heads], TRUNC_STD, true);
        self.params.insert(format!("{name}.attn.rel_bias"), table, true);
        self.linear(&format!("{name}.attn.proj"), c, c);
        self.layer_norm(&format!("{name}.ln2"), c);
        self.linear(&format!("{name}.mlp.fc1"), mlp_ratio * c, c);
        self.linear(&format!("{name}.mlp.fc2"), c, mlp_ratio * c);
    }

    pub fn finish(self) -> ModelParams {
        self.params
    }
}

fn build(cfg: &ModelConfig, b: &mut Builder) {
    let depth = cfg.encoder_depth;
    let convs = cfg.convs_per_block;
    b.residual_block("unet.enc0", cfg.in_channels, cfg.level_channels(0), cfg.kernel_sizes[0], convs);
    for l in 1..depth {
        let (prev, cur) = (cfg.level_channels(l - 1), cfg.level_channels(l));
        b.mix(&format!("unet.down{l}"), cur, prev * 8, true);
        b.residual_block(&format!("unet.enc{l}"), cur, cur, cfg.kernel_sizes[l], convs);
    }
    for l in (0..depth - 1).rev() {
        let (c, deeper) = (cfg.level_channels(l), cfg.level_channels(l + 1));
        b.mix(&format!("unet.up{l}"), c * 8, deeper, true);
        b.residual_block(&format!("unet.dec{l}"), 2 * c, c, cfg.kernel_sizes[l], convs);
    }

    let base = cfg.base_channels;
    if cfg.use_swin_gce {
        let s = &cfg.swin;
        let factor = if s.patch_reduction { 8 } else { 1 };
        b.mix("swin.embed", s.embed_dim, base * factor, true);
        for i in 0..s.num_blocks {
            b.swin_block(&format!("swin.block{i}"), s.embed_dim, s.num_heads, s.window_size, s.mlp_ratio);
        }
        b.mix("swin.unembed", cfg.swin_out_channels() * factor, s.embed_dim, true);
    }

    let fused_in = base + if cfg.use_swin_gce { cfg.swin_out_channels() } else { base };
    b.mix("fusion.conv", cfg.fusion_channels, fused_in, false);
    b.batch_norm("fusion.bn", cfg.fusion_channels);
    b.conv("head.conv3", cfg.fusion_channels, cfg.fusion_channels, 3, true);
    b.mix("head.conv1", cfg.out_channels, cfg.fusion_channels, true);
}
