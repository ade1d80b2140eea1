//! Feature fusion, segmentation head and the full forward pass.

use super::config::ModelConfig;
use super::context::Forward;
use super::params::ModelParams;
use super::swin::swin_gce_forward;
use super::unet::unet_sed_forward;
use super::{ModelError, Result};
use crate::autograd::Var;
use crate::tensor::Tensor;

/// Concatenates the two branches along channels, mixes them with a bias-free
/// 1×1×1 convolution, then batch norm, ReLU and dropout.
pub fn fuse_features(f: &mut Forward, f_unet: Var, f_swin: Var, dropout_rate: f64) -> Result<Var> {
    let (a, b) = (f.shape(f_unet), f.shape(f_swin));
    if a[2..] != b[2..] || a[0] != b[0] {
        return Err(ModelError::SpatialMismatch { left: a, right: b });
    }
    let expected = f.params().tensor("fusion.conv.weight").shape()[1];
    if a[1] + b[1] != expected {
        return Err(ModelError::ChannelMismatch { stage: "fusion".into(), expected, actual: a[1] + b[1] });
    }
    let combined = f.graph.concat_channels(f_unet, f_swin);
    let fused = f.conv("fusion.conv", combined);
    let normed = f.batch_norm("fusion.bn", fused);
    let activated = f.graph.relu(normed);
    Ok(f.dropout(activated, dropout_rate))
}

/// 3×3×3 convolution followed by a 1×1×1 convolution to one logit channel.
pub fn segmentation_head(f: &mut Forward, x: Var) -> Result<Var> {
    let expected = f.params().tensor("head.conv3.weight").shape()[1];
    let actual = f.shape(x)[1];
    if expected != actual {
        return Err(ModelError::ChannelMismatch { stage: "head".into(), expected, actual });
    }
    let h = f.conv("head.conv3", x);
    Ok(f.conv("head.conv1", h))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| ModelError::Stage { stage: name, source: Box::new(e) })
}

/// Full network on a `[batch, in_channels, d0, d1, d2]` input; returns
/// per-voxel foreground logits `[batch, 1, d0, d1, d2]`.
///
/// Without the global-context branch the U-Net features fill both fusion
/// slots so the head keeps the same shape.
pub fn forward(f: &mut Forward, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = f.shape(x);
    if shape.len() != 5 || shape[1] != cfg.in_channels {
        return Err(ModelError::InputShape { shape, channels: cfg.in_channels });
    }
    let dims = [shape[2], shape[3], shape[4]];
    let divisor = cfg.spatial_divisor();
    if dims.iter().any(|d| d % divisor != 0) {
        return Err(ModelError::IndivisibleInput { dims, divisor });
    }
    let f_unet = stage("unet", unet_sed_forward(f, cfg, x))?;
    let f_swin = if cfg.use_swin_gce { stage("swin", swin_gce_forward(f, cfg, f_unet))? } else { f_unet };
    let fused = stage("fusion", fuse_features(f, f_unet, f_swin, cfg.dropout_rate))?;
    stage("head", segmentation_head(f, fused))
}

/// Evaluation-mode logits for a batch tensor.
pub fn infer(params: &ModelParams, cfg: &ModelConfig, input: Tensor) -> Result<Tensor> {
    let mut f = Forward::eval(params);
    let x = f.input(input);
    let y = forward(&mut f, cfg, x)?;
    Ok(f.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect())
    }

    #[test]
    fn toy_forward_shape_at_sixteen() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let y = infer(&p, &cfg, input(&[1, 1, 16, 16, 16], 1)).unwrap();
        assert_eq!(y.shape(), [1, 1, 16, 16, 16]);
        assert!(y.all_finite());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let err = infer(&p, &cfg, input(&[1, 1, 30, 30, 30], 1)).unwrap_err();
        assert!(matches!(err, ModelError::IndivisibleInput { divisor: 4, .. }));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::init(&cfg, 0).unwrap();
        assert!(matches!(infer(&p, &cfg, input(&[1, 2, 8, 8, 8], 1)), Err(ModelError::InputShape { .. })));
    }
}
