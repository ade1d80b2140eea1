//! Residual convolution blocks and the convolutional encoder-decoder.

use super::config::ModelConfig;
use super::context::Forward;
use super::{ModelError, Result};
use crate::autograd::{Graph, Var};

/// `[b, c, d0, d1, d2]` to `[b, 8c, d0/2, d1/2, d2/2]`; channel `8c + s` holds
/// sub-voxel `s = 4 a0 + 2 a1 + a2` of each 2×2×2 cell.
pub(crate) fn space_to_depth(g: &mut Graph, x: Var) -> Var {
    let [b, c, d0, d1, d2]: [usize; 5] = g.shape(x).try_into().expect("5-D feature map");
    let (h0, h1, h2) = (d0 / 2, d1 / 2, d2 / 2);
    let mut idx = Vec::with_capacity(b * c * d0 * d1 * d2);
    for n in 0..b {
        for ch in 0..c {
            for s in 0..8 {
                let (a0, a1, a2) = (s / 4, (s / 2) % 2, s % 2);
                for i0 in 0..h0 {
                    for i1 in 0..h1 {
                        for i2 in 0..h2 {
                            let src = (((n * c + ch) * d0 + 2 * i0 + a0) * d1 + 2 * i1 + a1) * d2 + 2 * i2 + a2;
                            idx.push(src as u32);
                        }
                    }
                }
            }
        }
    }
    g.gather(x, idx.into(), &[b, 8 * c, h0, h1, h2])
}

/// Inverse of [`space_to_depth`].
pub(crate) fn depth_to_space(g: &mut Graph, x: Var) -> Var {
    let [b, c8, h0, h1, h2]: [usize; 5] = g.shape(x).try_into().expect("5-D feature map");
    assert_eq!(c8 % 8, 0, "depth_to_space needs a multiple of 8 channels");
    let c = c8 / 8;
    let (d0, d1, d2) = (2 * h0, 2 * h1, 2 * h2);
    let mut idx = Vec::with_capacity(b * c8 * h0 * h1 * h2);
    for n in 0..b {
        for ch in 0..c {
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    for i2 in 0..d2 {
                        let s = (i0 % 2) * 4 + (i1 % 2) * 2 + i2 % 2;
                        let src = (((n * c8 + ch * 8 + s) * h0 + i0 / 2) * h1 + i1 / 2) * h2 + i2 / 2;
                        idx.push(src as u32);
                    }
                }
            }
        }
    }
    g.gather(x, idx.into(), &[b, c, d0, d1, d2])
}

/// `PReLU(BN(conv_n(... conv_1(x))) + skip(x))` followed by dropout, where
/// every inner convolution is followed by batch norm and PReLU and `skip` is
/// a learned 1×1×1 projection when the channel count changes.
pub fn residual_conv_block(f: &mut Forward, prefix: &str, x: Var, dropout_rate: f64) -> Result<Var> {
    if !f.value(x).all_finite() {
        return Err(ModelError::NonFinite { stage: prefix.to_string() });
    }
    let expected = f.params().tensor(&format!("{prefix}.conv0.weight")).shape()[1];
    let actual = f.shape(x)[1];
    if expected != actual {
        return Err(ModelError::ChannelMismatch { stage: prefix.to_string(), expected, actual });
    }
    let convs = (0..).take_while(|i| f.has_param(&format!("{prefix}.conv{i}.weight"))).count();
    let mut h = x;
    for i in 0..convs {
        h = f.conv(&format!("{prefix}.conv{i}"), h);
        h = f.batch_norm(&format!("{prefix}.bn{i}"), h);
        if i + 1 < convs {
            let slope = f.param(&format!("{prefix}.prelu{i}.slope"));
            h = f.graph.prelu(h, slope);
        }
    }
    let proj = format!("{prefix}.proj");
    let skip = if f.has_param(&format!("{proj}.weight")) { f.conv(&proj, x) } else { x };
    let sum = f.graph.add(h, skip);
    let slope = f.param(&format!("{prefix}.prelu{}.slope", convs - 1));
    let out = f.graph.prelu(sum, slope);
    Ok(f.dropout(out, dropout_rate))
}

/// Encoder-decoder with skip connections; output has `base_channels`
/// channels at the input resolution.
pub fn unet_sed_forward(f: &mut Forward, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = f.shape(x);
    let dims = [shape[2], shape[3], shape[4]];
    let divisor = 1 << (cfg.encoder_depth - 1);
    if dims.iter().any(|d| d % divisor != 0) {
        return Err(ModelError::IndivisibleInput { dims, divisor });
    }
    let p = cfg.dropout_rate;
    let mut skips = vec![residual_conv_block(f, "unet.enc0", x, p)?];
    for l in 1..cfg.encoder_depth {
        let prev = *skips.last().expect("encoder level");
        let s = space_to_depth(&mut f.graph, prev);
        let d = f.conv(&format!("unet.down{l}"), s);
        skips.push(residual_conv_block(f, &format!("unet.enc{l}"), d, p)?);
    }
    let mut h = skips.pop().expect("deepest level");
    for l in (0..cfg.encoder_depth - 1).rev() {
        let u = f.conv(&format!("unet.up{l}"), h);
        let u = depth_to_space(&mut f.graph, u);
        let cat = f.graph.concat_channels(u, skips[l]);
        h = residual_conv_block(f, &format!("unet.dec{l}"), cat, p)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn depth_to_space_inverts_space_to_depth() {
        let x = Tensor::from_vec(&[2, 3, 4, 2, 6], (0..288).map(|i| i as f64).collect());
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let s = space_to_depth(&mut g, v);
        assert_eq!(g.shape(s), [2, 24, 2, 1, 3]);
        let back = depth_to_space(&mut g, s);
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn space_to_depth_groups_cells() {
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|i| i as f64).collect());
        let mut g = Graph::inference();
        let v = g.constant(x);
        let s = space_to_depth(&mut g, v);
        assert_eq!(g.value(s).data(), (0..8).map(|i| i as f64).collect::<Vec<_>>());
    }
}
