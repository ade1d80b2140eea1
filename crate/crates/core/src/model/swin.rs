//! Shifted-window self-attention blocks and the global-context branch.

use std::rc::Rc;

use super::config::ModelConfig;
use super::context::Forward;
use super::unet::{depth_to_space, space_to_depth};
use super::{ModelError, Result};
use crate::autograd::{attention_probabilities, AttentionMask, Graph, Var, NO_SOURCE};
use crate::tensor::Tensor;

/// Assignment of grid positions to attention windows.
///
/// The grid is zero-padded up to multiples of the window size and then
/// cyclically rolled by `-shift` on every axis, so window position `r` holds
/// padded position `(r + shift) mod padded`.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub grid: [usize; 3],
    pub window: usize,
    pub shift: usize,
    pub padded: [usize; 3],
    /// Windows along each axis.
    pub counts: [usize; 3],
    /// Flat grid index for every (window, token) slot, or [`NO_SOURCE`] for padding.
    pub source: Vec<u32>,
}

impl WindowLayout {
    pub fn new(grid: [usize; 3], window: usize, shift: usize) -> Self {
        assert!(window >= 1 && shift < window.max(1), "shift {shift} must be below window {window}");
        let padded = grid.map(|g| g.div_ceil(window) * window);
        let counts = padded.map(|p| p / window);
        let n = window * window * window;
        let mut source = Vec::with_capacity(counts.iter().product::<usize>() * n);
        for k0 in 0..counts[0] {
            for k1 in 0..counts[1] {
                for k2 in 0..counts[2] {
                    for t in 0..n {
                        let local = [t / (window * window), (t / window) % window, t % window];
                        let k = [k0, k1, k2];
                        let o: [usize; 3] = std::array::from_fn(|a| (k[a] * window + local[a] + shift) % padded[a]);
                        let inside = (0..3).all(|a| o[a] < grid[a]);
                        source.push(if inside { ((o[0] * grid[1] + o[1]) * grid[2] + o[2]) as u32 } else { NO_SOURCE });
                    }
                }
            }
        }
        Self { grid, window, shift, padded, counts, source }
    }

    pub fn num_windows(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn tokens(&self) -> usize {
        self.window.pow(3)
    }

    pub fn has_padding(&self) -> bool {
        self.padded != self.grid
    }

    /// Position of a window slot in the rolled, padded frame.
    pub fn rolled_coords(&self, window: usize, token: usize) -> [usize; 3] {
        let w = self.window;
        let [_, c1, c2] = self.counts;
        let k = [window / (c1 * c2), (window / c2) % c1, window % c2];
        let local = [token / (w * w), (token / w) % w, token % w];
        std::array::from_fn(|a| k[a] * w + local[a])
    }

    /// Attention mask for this layout, or `None` when every pair is allowed.
    ///
    /// With a shift, a window at the far end of an axis holds positions that
    /// wrapped around from the start; those may not attend to the rest.
    /// Padding slots are never attended to except by themselves.
    pub fn mask(&self) -> Option<AttentionMask> {
        if self.shift == 0 && !self.has_padding() {
            return None;
        }
        let (nw, n) = (self.num_windows(), self.tokens());
        let (w, s) = (self.window, self.shift);
        let region = |r: usize, p: usize| {
            if s == 0 || r < p - w {
                0
            } else if r < p - s {
                1
            } else {
                2
            }
        };
        let mut allowed = vec![false; nw * n * n];
        let mut regions = vec![[0u8; 3]; n];
        for win in 0..nw {
            for (t, reg) in regions.iter_mut().enumerate() {
                let r = self.rolled_coords(win, t);
                *reg = std::array::from_fn(|a| region(r[a], self.padded[a]));
            }
            let valid = |t: usize| self.source[win * n + t] != NO_SOURCE;
            for i in 0..n {
                for j in 0..n {
                    allowed[(win * n + i) * n + j] = regions[i] == regions[j] && (valid(j) || i == j);
                }
            }
        }
        Some(AttentionMask { windows: nw, tokens: n, allowed })
    }
}

/// Row of the relative-position table for each query/key pair in a window.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window.pow(3);
    let span = 2 * window - 1;
    let coord = |t: usize| [t / (window * window), (t / window) % window, t % window];
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let ci = coord(i);
        for j in 0..n {
            let cj = coord(j);
            let d: [usize; 3] = std::array::from_fn(|a| ci[a] + window - 1 - cj[a]);
            idx.push(((d[0] * span + d[1]) * span + d[2]) as u32);
        }
    }
    idx
}

/// Splits a `[batch, channels, d0, d1, d2]` map into `[batch * windows, w³, channels]`.
pub fn window_partition(x: &Tensor, window: usize, shift: usize) -> Tensor {
    let [b, c, d0, d1, d2]: [usize; 5] = x.shape().try_into().expect("5-D feature map");
    let layout = WindowLayout::new([d0, d1, d2], window, shift);
    let (nw, n, vol) = (layout.num_windows(), layout.tokens(), d0 * d1 * d2);
    let mut out = vec![0.0; b * nw * n * c];
    for batch in 0..b {
        for (slot, &src) in layout.source.iter().enumerate() {
            if src == NO_SOURCE {
                continue;
            }
            let dst = (batch * nw * n + slot) * c;
            for ch in 0..c {
                out[dst + ch] = x.data()[(batch * c + ch) * vol + src as usize];
            }
        }
    }
    Tensor::from_vec(&[b * nw, n, c], out)
}

/// Inverse of [`window_partition`]; padding slots are dropped.
pub fn window_reverse(windows: &Tensor, grid: [usize; 3], window: usize, shift: usize) -> Tensor {
    let layout = WindowLayout::new(grid, window, shift);
    let (nw, n) = (layout.num_windows(), layout.tokens());
    let [bw, tn, c]: [usize; 3] = windows.shape().try_into().expect("3-D window tensor");
    assert_eq!(tn, n, "tokens per window");
    assert_eq!(bw % nw, 0, "window count");
    let b = bw / nw;
    let vol: usize = grid.iter().product();
    let mut out = vec![0.0; b * c * vol];
    for batch in 0..b {
        for (slot, &src) in layout.source.iter().enumerate() {
            if src == NO_SOURCE {
                continue;
            }
            let from = (batch * nw * n + slot) * c;
            for ch in 0..c {
                out[(batch * c + ch) * vol + src as usize] = windows.data()[from + ch];
            }
        }
    }
    Tensor::from_vec(&[b, c, grid[0], grid[1], grid[2]], out)
}

/// `[b, c, d0, d1, d2]` to channels-last tokens `[b, d0*d1*d2, c]`.
pub(crate) fn to_tokens(g: &mut Graph, x: Var) -> Var {
    let [b, c, d0, d1, d2]: [usize; 5] = g.shape(x).try_into().expect("5-D feature map");
    let vol = d0 * d1 * d2;
    let mut idx = Vec::with_capacity(b * vol * c);
    for n in 0..b {
        for p in 0..vol {
            for ch in 0..c {
                idx.push(((n * c + ch) * vol + p) as u32);
            }
        }
    }
    g.gather(x, idx.into(), &[b, vol, c])
}

/// Inverse of [`to_tokens`].
pub(crate) fn from_tokens(g: &mut Graph, x: Var, grid: [usize; 3]) -> Var {
    let [b, vol, c]: [usize; 3] = g.shape(x).try_into().expect("token tensor");
    let mut idx = Vec::with_capacity(b * vol * c);
    for n in 0..b {
        for ch in 0..c {
            for p in 0..vol {
                idx.push(((n * vol + p) * c + ch) as u32);
            }
        }
    }
    g.gather(x, idx.into(), &[b, c, grid[0], grid[1], grid[2]])
}

fn window_gather_index(layout: &WindowLayout, b: usize, c: usize) -> Vec<u32> {
    let vol: usize = layout.grid.iter().product();
    let slots = layout.source.len();
    let mut idx = Vec::with_capacity(b * slots * c);
    for n in 0..b {
        for &src in &layout.source {
            for ch in 0..c {
                idx.push(if src == NO_SOURCE { NO_SOURCE } else { ((n * vol + src as usize) * c + ch) as u32 });
            }
        }
    }
    idx
}

fn window_scatter_index(layout: &WindowLayout, b: usize, c: usize) -> Vec<u32> {
    let vol: usize = layout.grid.iter().product();
    let slots = layout.source.len();
    let mut slot_of = vec![0usize; vol];
    for (slot, &src) in layout.source.iter().enumerate() {
        if src != NO_SOURCE {
            slot_of[src as usize] = slot;
        }
    }
    let mut idx = Vec::with_capacity(b * vol * c);
    for n in 0..b {
        for &slot in &slot_of {
            for ch in 0..c {
                idx.push(((n * slots + slot) * c + ch) as u32);
            }
        }
    }
    idx
}

struct AttentionInputs {
    layout: WindowLayout,
    qkv: Var,
    bias: Var,
    mask: Option<Rc<AttentionMask>>,
    heads: usize,
}

fn attention_inputs(f: &mut Forward, prefix: &str, tokens: Var, grid: [usize; 3], window: usize, shift: usize) -> AttentionInputs {
    let [b, _, c]: [usize; 3] = f.shape(tokens).try_into().expect("token tensor");
    let layout = WindowLayout::new(grid, window, shift);
    let n = layout.tokens();
    let idx = window_gather_index(&layout, b, c);
    let windows = f.graph.gather(tokens, idx.into(), &[b * layout.num_windows(), n, c]);
    let qkv = f.linear(&format!("{prefix}.qkv"), windows);

    let table = f.param(&format!("{prefix}.rel_bias"));
    let [rows, heads]: [usize; 2] = f.shape(table).try_into().expect("relative bias table");
    assert_eq!(rows, (2 * window - 1).pow(3), "relative bias table does not match window {window}");
    let rel = relative_position_index(window);
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        idx.extend(rel.iter().map(|&r| r * heads as u32 + h as u32));
    }
    let bias = f.graph.gather(table, idx.into(), &[heads, n, n]);
    let mask = layout.mask().map(Rc::new);
    AttentionInputs { layout, qkv, bias, mask, heads }
}

fn check_tokens(f: &Forward, prefix: &str, x: Var, expected: usize) -> Result<()> {
    let c = *f.shape(x).last().expect("non-empty shape");
    if c != expected {
        return Err(ModelError::ChannelMismatch { stage: prefix.to_string(), expected, actual: c });
    }
    Ok(())
}

/// Windowed multi-head self-attention on channels-last tokens, output projected.
pub(crate) fn sw_msa_tokens(f: &mut Forward, prefix: &str, tokens: Var, grid: [usize; 3], window: usize, shift: usize) -> Result<Var> {
    let c = f.params().tensor(&format!("{prefix}.proj.weight")).shape()[0];
    check_tokens(f, prefix, tokens, c)?;
    let heads = f.params().tensor(&format!("{prefix}.rel_bias")).shape()[1];
    if c % heads != 0 {
        return Err(ModelError::InvalidConfig(format!("width {c} not divisible by {heads} heads")));
    }
    let b = f.shape(tokens)[0];
    let inp = attention_inputs(f, prefix, tokens, grid, window, shift);
    let attn = f.graph.window_attention(inp.qkv, inp.bias, inp.mask, inp.heads);
    let proj = f.linear(&format!("{prefix}.proj"), attn);
    let idx = window_scatter_index(&inp.layout, b, c);
    let vol: usize = grid.iter().product();
    Ok(f.graph.gather(proj, idx.into(), &[b, vol, c]))
}

/// Shifted-window multi-head self-attention on a `[b, c, d0, d1, d2]` map.
/// `prefix` names the attention parameters (`{prefix}.qkv`, `.rel_bias`, `.proj`).
pub fn sw_msa(f: &mut Forward, prefix: &str, x: Var, window: usize, shift: usize) -> Result<Var> {
    let grid = spatial(f, x);
    let t = to_tokens(&mut f.graph, x);
    let y = sw_msa_tokens(f, prefix, t, grid, window, shift)?;
    Ok(from_tokens(&mut f.graph, y, grid))
}

/// Attention weights `[batch * windows, heads, w³, w³]` that [`sw_msa`]
/// would use on `x`, together with the window layout.
pub fn sw_msa_weights(f: &mut Forward, prefix: &str, x: Var, window: usize, shift: usize) -> (WindowLayout, Vec<f64>) {
    let grid = spatial(f, x);
    let t = to_tokens(&mut f.graph, x);
    let inp = attention_inputs(f, prefix, t, grid, window, shift);
    let probs = attention_probabilities(f.value(inp.qkv), f.value(inp.bias), inp.mask.as_deref(), inp.heads);
    (inp.layout, probs)
}

fn spatial(f: &Forward, x: Var) -> [usize; 3] {
    let s = f.shape(x);
    assert_eq!(s.len(), 5, "expected a 5-D feature map, got {s:?}");
    [s[2], s[3], s[4]]
}

fn swin_block_tokens(f: &mut Forward, prefix: &str, x: Var, grid: [usize; 3], window: usize, shift: usize) -> Result<Var> {
    let c = f.params().tensor(&format!("{prefix}.ln1.gamma")).len();
    check_tokens(f, prefix, x, c)?;
    f.record_shift(shift);
    let h = f.layer_norm(&format!("{prefix}.ln1"), x);
    let a = sw_msa_tokens(f, &format!("{prefix}.attn"), h, grid, window, shift)?;
    let y = f.graph.add(x, a);
    let h = f.layer_norm(&format!("{prefix}.ln2"), y);
    let h = f.linear(&format!("{prefix}.mlp.fc1"), h);
    let h = f.graph.gelu(h);
    let h = f.linear(&format!("{prefix}.mlp.fc2"), h);
    Ok(f.graph.add(y, h))
}

/// `y = x + attn(LN(x)); out = y + MLP(LN(y))` on a `[b, c, d0, d1, d2]` map.
pub fn swin_block(f: &mut Forward, prefix: &str, x: Var, window: usize, shift: usize) -> Result<Var> {
    let grid = spatial(f, x);
    let t = to_tokens(&mut f.graph, x);
    let y = swin_block_tokens(f, prefix, t, grid, window, shift)?;
    Ok(from_tokens(&mut f.graph, y, grid))
}

/// Patch embedding, alternating unshifted/shifted blocks, and un-embedding
/// back to the input resolution with `cfg.swin_out_channels()` channels.
pub fn swin_gce_forward(f: &mut Forward, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let s = &cfg.swin;
    let shape = f.shape(x);
    if shape[1] != cfg.base_channels {
        return Err(ModelError::ChannelMismatch { stage: "swin.embed".into(), expected: cfg.base_channels, actual: shape[1] });
    }
    let e = if s.patch_reduction {
        if shape[2..].iter().any(|d| d % 2 != 0) {
            return Err(ModelError::IndivisibleInput { dims: [shape[2], shape[3], shape[4]], divisor: 2 });
        }
        let r = space_to_depth(&mut f.graph, x);
        f.conv("swin.embed", r)
    } else {
        f.conv("swin.embed", x)
    };
    let grid = spatial(f, e);
    let mut t = to_tokens(&mut f.graph, e);
    for i in 0..s.num_blocks {
        let shift = if i % 2 == 1 { s.window_size / 2 } else { 0 };
        t = swin_block_tokens(f, &format!("swin.block{i}"), t, grid, s.window_size, shift)?;
    }
    let e = from_tokens(&mut f.graph, t, grid);
    let u = f.conv("swin.unembed", e);
    Ok(if s.patch_reduction { depth_to_space(&mut f.graph, u) } else { u })
}
