//! Seeded spatial augmentation applied identically to an image and its mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::interp::{sample, Boundary, Interpolation};
use super::{PreprocessError, Result};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_probability_per_axis: f64,
    /// Each Euler angle is drawn uniformly from `±max_rotation_degrees`.
    pub max_rotation_degrees: f64,
    /// Isotropic scale drawn uniformly from `[lo, hi]`.
    pub affine_scale_range: (f64, f64),
    /// Each translation component is drawn uniformly from `±affine_translation_mm`.
    pub affine_translation_mm: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability_per_axis: 0.5,
            max_rotation_degrees: 10.0,
            affine_scale_range: (0.9, 1.1),
            affine_translation_mm: 4.0,
        }
    }
}

impl AugmentationConfig {
    /// Settings under which augmentation is the identity.
    pub fn none() -> Self {
        Self { flip_probability_per_axis: 0.0, max_rotation_degrees: 0.0, affine_scale_range: (1.0, 1.0), affine_translation_mm: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.affine_scale_range;
        let ok = (0.0..=1.0).contains(&self.flip_probability_per_axis)
            && self.max_rotation_degrees >= 0.0
            && self.affine_translation_mm >= 0.0
            && lo > 0.0
            && lo <= hi;
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::InvalidConfig(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// The random draw behind one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub angles_rad: [f64; 3],
    pub scale: f64,
    pub translation_mm: [f64; 3],
}

impl AugmentDraw {
    /// Draws every component regardless of the settings so the random stream
    /// does not depend on which transforms are enabled.
    pub fn sample(cfg: &AugmentationConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |m: f64| (2.0 * rng.random::<f64>() - 1.0) * m;
        let flips_u: [f64; 3] = std::array::from_fn(|_| sym(1.0).abs());
        let max_rad = cfg.max_rotation_degrees.to_radians();
        let angles_rad = std::array::from_fn(|_| sym(max_rad));
        let (lo, hi) = cfg.affine_scale_range;
        let scale = lo + (hi - lo) * (sym(1.0) + 1.0) / 2.0;
        let translation_mm = std::array::from_fn(|_| sym(cfg.affine_translation_mm));
        Self { flips: flips_u.map(|u| u < cfg.flip_probability_per_axis), angles_rad, scale, translation_mm }
    }

    pub fn is_affine_identity(&self) -> bool {
        self.angles_rad.iter().all(|&a| a == 0.0) && self.scale == 1.0 && self.translation_mm.iter().all(|&t| t == 0.0)
    }

    /// Rotation `Rz * Ry * Rx`.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.angles_rad;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rz, &matmul3(&ry, &rx))
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Mirrors a volume along one axis (0 = x, 1 = y, 2 = z).
pub fn flip_axis(v: &Volume, axis: usize) -> Volume {
    let n = v.shape();
    Volume::from_fn(v.geom, |x, y, z| {
        let mut c = [x, y, z];
        c[axis] = n[axis] - 1 - c[axis];
        v.get(c[0], c[1], c[2])
    })
}

fn flip_mask(m: &Mask, axis: usize) -> Mask {
    let n = m.shape();
    let mut data = Vec::with_capacity(m.data.len());
    for z in 0..n[2] {
        for y in 0..n[1] {
            for x in 0..n[0] {
                let mut c = [x, y, z];
                c[axis] = n[axis] - 1 - c[axis];
                data.push(m.data[m.geom.index(c[0], c[1], c[2])]);
            }
        }
    }
    Mask { geom: m.geom, data }
}

/// Resamples through the inverse of `x -> centre + R * scale * (x - centre) + t`.
fn warp(v: &Volume, draw: &AugmentDraw, interp: Interpolation) -> Volume {
    let g = v.geom;
    let r = draw.rotation();
    let centre: [f64; 3] = std::array::from_fn(|a| 0.5 * (g.shape[a] - 1) as f64 * g.spacing[a]);
    Volume::from_fn(g, |x, y, z| {
        let p = [x as f64 * g.spacing[0], y as f64 * g.spacing[1], z as f64 * g.spacing[2]];
        let d: [f64; 3] = std::array::from_fn(|a| p[a] - centre[a] - draw.translation_mm[a]);
        // R is orthogonal, so its inverse is its transpose.
        let q: [f64; 3] = std::array::from_fn(|a| {
            (0..3).map(|k| r[k][a] * d[k]).sum::<f64>() / draw.scale + centre[a]
        });
        let idx: [f64; 3] = std::array::from_fn(|a| q[a] / g.spacing[a]);
        sample(v, idx, interp, Boundary::Fill(0.0))
    })
}

/// Applies the same random flips and affine warp to both volumes: linear
/// interpolation for the image, nearest for the mask, zero outside the grid.
pub fn augment(image: &Volume, mask: &Mask, cfg: &AugmentationConfig, seed: u64) -> Result<(Volume, Mask)> {
    cfg.validate()?;
    image.geom.ensure_matches(&mask.geometry())?;
    Ok(apply_draw(image, mask, &AugmentDraw::sample(cfg, seed)))
}

pub fn apply_draw(image: &Volume, mask: &Mask, draw: &AugmentDraw) -> (Volume, Mask) {
    let mut img = image.clone();
    let mut msk = mask.clone();
    for axis in 0..3 {
        if draw.flips[axis] {
            img = flip_axis(&img, axis);
            msk = flip_mask(&msk, axis);
        }
    }
    if !draw.is_affine_identity() {
        img = warp(&img, draw, Interpolation::Linear);
        let warped = warp(&msk.to_volume(), draw, Interpolation::Nearest);
        msk = Mask::threshold(&warped, 0.5);
    }
    (img, msk)
}
