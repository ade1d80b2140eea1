use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Shifted-window transformer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinConfig {
    pub window_size: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Even, so unshifted and shifted blocks come in pairs.
    pub num_blocks: usize,
    /// Hidden width of the MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Halve the spatial grid before the blocks and restore it afterwards.
    pub patch_reduction: bool,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self { window_size: 4, num_heads: 2, embed_dim: 32, num_blocks: 2, mlp_ratio: 4, patch_reduction: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Width of the first encoder level; doubles at each deeper level.
    pub base_channels: usize,
    pub encoder_depth: usize,
    /// One odd kernel size per encoder level, shared by the matching decoder level.
    pub kernel_sizes: Vec<usize>,
    pub convs_per_block: usize,
    pub dropout_rate: f64,
    pub swin: SwinConfig,
    pub fusion_channels: usize,
    pub use_swin_gce: bool,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small preset that trains on a CPU in minutes at 32³.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            encoder_depth: 3,
            kernel_sizes: vec![3; 3],
            convs_per_block: 2,
            dropout_rate: 0.1,
            swin: SwinConfig::default(),
            fusion_channels: 8,
            use_swin_gce: true,
            out_channels: 1,
        }
    }

    /// Full-size preset of roughly one hundred million trainable parameters.
    pub fn full_scale() -> Self {
        Self {
            in_channels: 1,
            base_channels: 32,
            encoder_depth: 5,
            kernel_sizes: vec![3; 5],
            convs_per_block: 2,
            dropout_rate: 0.1,
            swin: SwinConfig {
                window_size: 7,
                num_heads: 12,
                embed_dim: 768,
                num_blocks: 10,
                mlp_ratio: 4,
                patch_reduction: true,
            },
            fusion_channels: 32,
            use_swin_gce: true,
            out_channels: 1,
        }
    }

    /// Channel count of encoder level `level`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of the global-context branch output, equal to the U-Net output.
    pub fn swin_out_channels(&self) -> usize {
        self.base_channels
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        let unet = 1 << (self.encoder_depth - 1);
        if self.use_swin_gce && self.swin.patch_reduction {
            unet.max(2)
        } else {
            unet
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.fusion_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be at least 1".into());
        }
        if self.kernel_sizes.len() != self.encoder_depth {
            return bad(format!(
                "kernel_sizes has {} entries for {} levels",
                self.kernel_sizes.len(),
                self.encoder_depth
            ));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return bad(format!("kernel size {k} is not odd"));
        }
        if self.convs_per_block == 0 {
            return bad("convs_per_block must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.out_channels != 1 {
            return bad("out_channels must be 1 (single foreground logit)".into());
        }
        if self.use_swin_gce {
            let s = &self.swin;
            if s.window_size < 2 {
                return bad(format!("window_size {} too small", s.window_size));
            }
            if s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                return bad(format!("embed_dim {} not divisible by {} heads", s.embed_dim, s.num_heads));
            }
            if s.num_blocks < 2 || s.num_blocks % 2 != 0 {
                return bad(format!("num_blocks {} must be even and at least 2", s.num_blocks));
            }
            if s.mlp_ratio == 0 {
                return bad("mlp_ratio must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn rejects_odd_block_count() {
        let mut c = ModelConfig::toy();
        c.swin.num_blocks = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_heads_not_dividing_embed() {
        let mut c = ModelConfig::toy();
        c.swin.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::toy();
        let s = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
