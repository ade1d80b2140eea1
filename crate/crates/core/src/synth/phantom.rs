//! Brain-like phantoms: an ellipsoid of tissue with spherical lesions, a
//! smooth multiplicative field and additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};
use crate::volume::{Geometry, Mask, Subject, Volume};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Side of the mid-plane of the first axis: left is the low-index half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    Both,
    None,
}

impl Hemisphere {
    pub fn name(self) -> &'static str {
        match self {
            Hemisphere::Left => "left",
            Hemisphere::Right => "right",
            Hemisphere::Both => "both",
            Hemisphere::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub background: f64,
    pub brain: f64,
    pub lesion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion_count: usize,
    pub lesion_radius_range_mm: (f64, f64),
    pub hemisphere: Hemisphere,
    /// Peak-to-peak variation of the multiplicative field, as a fraction.
    pub bias_field_amplitude: f64,
    pub noise_std: f64,
    pub tissue_intensities: TissueIntensities,
    /// Brain ellipsoid semi-axes as fractions of the field of view.
    pub brain_semi_axes: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32; 3],
            spacing: [4.0; 3],
            lesion_count: 1,
            lesion_radius_range_mm: (6.0, 10.0),
            hemisphere: Hemisphere::Left,
            bias_field_amplitude: 0.0,
            noise_std: 0.02,
            tissue_intensities: TissueIntensities { background: 0.0, brain: 0.6, lesion: 1.0 },
            brain_semi_axes: [0.4, 0.45, 0.4],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.shape.iter().any(|&n| n < 4) {
            return bad(format!("shape {:?} too small", self.shape));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        let (lo, hi) = self.lesion_radius_range_mm;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("lesion radius range ({lo}, {hi}) invalid"));
        }
        if (self.hemisphere == Hemisphere::None) != (self.lesion_count == 0) {
            return bad("hemisphere none exactly when lesion_count is 0".into());
        }
        if self.hemisphere == Hemisphere::Both && self.lesion_count < 2 {
            return bad("lesions in both hemispheres need at least two lesions".into());
        }
        if !(0.0..2.0).contains(&self.bias_field_amplitude) {
            return bad(format!("bias_field_amplitude {} outside [0, 2)", self.bias_field_amplitude));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std {} negative", self.noise_std));
        }
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0 && a <= 0.5)) {
            return bad(format!("brain_semi_axes {:?} outside (0, 0.5]", self.brain_semi_axes));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.shape, self.spacing, [0.0; 3]).map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }

    /// Brain support: voxel centres inside the ellipsoid.
    pub fn brain_mask(&self) -> Result<Mask> {
        let g = self.geometry()?;
        let centre = self.shape.map(|n| 0.5 * (n - 1) as f64);
        let semi: [f64; 3] = std::array::from_fn(|a| self.brain_semi_axes[a] * self.shape[a] as f64);
        let v = Volume::from_fn(g, |x, y, z| {
            let c = [x, y, z];
            let r: f64 = (0..3).map(|a| ((c[a] as f64 - centre[a]) / semi[a]).powi(2)).sum();
            (r <= 1.0) as u8 as f64
        });
        Ok(Mask::threshold(&v, 0.5))
    }
}

/// Smooth field with values in `[1 - a/2, 1 + a/2]` attaining both ends.
pub fn smooth_bias_field(geom: Geometry, amplitude: f64, rng: &mut impl Rng) -> Volume {
    if amplitude == 0.0 {
        return Volume::filled(geom, 1.0);
    }
    let mut unit = || {
        let v: [f64; 3] = std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.map(|x| x / n)
    };
    let d = unit();
    let e = unit();
    let phase = rng.random::<f64>() * std::f64::consts::PI;
    let n = geom.shape;
    let raw = Volume::from_fn(geom, |x, y, z| {
        let c = [x, y, z];
        let p: [f64; 3] = std::array::from_fn(|a| if n[a] > 1 { 2.0 * c[a] as f64 / (n[a] - 1) as f64 - 1.0 } else { 0.0 });
        let lin: f64 = (0..3).map(|a| d[a] * p[a]).sum();
        let wave: f64 = (0..3).map(|a| e[a] * p[a]).sum();
        lin + 0.5 * (0.5 * std::f64::consts::PI * wave + phase).cos()
    });
    let (lo, hi) = raw.min_max().expect("non-empty");
    let mid = 0.5 * (lo + hi);
    let span = (hi - lo).max(1e-12);
    raw.map(|h| 1.0 + amplitude * (h - mid) / span)
}

struct Lesion {
    centre: [usize; 3],
    radius_mm: f64,
}

impl Lesion {
    fn voxels(&self, g: &Geometry) -> Vec<[usize; 3]> {
        let reach: [usize; 3] = std::array::from_fn(|a| (self.radius_mm / g.spacing[a]).floor() as usize);
        let mut out = Vec::new();
        for z in self.centre[2].saturating_sub(reach[2])..=(self.centre[2] + reach[2]).min(g.shape[2] - 1) {
            for y in self.centre[1].saturating_sub(reach[1])..=(self.centre[1] + reach[1]).min(g.shape[1] - 1) {
                for x in self.centre[0].saturating_sub(reach[0])..=(self.centre[0] + reach[0]).min(g.shape[0] - 1) {
                    let c = [x, y, z];
                    let d2: f64 = (0..3).map(|a| ((c[a] as f64 - self.centre[a] as f64) * g.spacing[a]).powi(2)).sum();
                    if d2 <= self.radius_mm * self.radius_mm {
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

fn side_of(x: usize, nx: usize) -> Hemisphere {
    if (x as f64) < 0.5 * (nx - 1) as f64 {
        Hemisphere::Left
    } else {
        Hemisphere::Right
    }
}

/// Whether every 26-neighbour of `c` (and `c`) satisfies `pred`.
fn neighbourhood_all(g: &Geometry, c: [usize; 3], pred: impl Fn(usize) -> bool) -> bool {
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let p = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                if (0..3).any(|a| p[a] < 0 || p[a] >= g.shape[a] as isize) {
                    return false;
                }
                if !pred(g.index(p[0] as usize, p[1] as usize, p[2] as usize)) {
                    return false;
                }
            }
        }
    }
    true
}

/// Generates one phantom subject, deterministic in `(spec, seed)`.
///
/// Lesions are balls centred on voxel centres, lying strictly inside the
/// brain (every 26-neighbour of a lesion voxel is brain), entirely on the
/// requested side of the mid-plane, and separated from each other by at
/// least one background voxel so each is its own component.
pub fn generate_phantom(id: &str, spec: &PhantomSpec, seed: u64) -> Result<Subject> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brain = spec.brain_mask()?;
    let brain_voxels: Vec<usize> = (0..brain.data.len()).filter(|&i| brain.data[i] != 0).collect();
    if brain_voxels.is_empty() {
        return Err(SynthError::InvalidSpec("brain ellipsoid contains no voxel centres".into()));
    }

    let mut lesion = vec![0u8; g.len()];
    let (rlo, rhi) = spec.lesion_radius_range_mm;
    for k in 0..spec.lesion_count {
        let side = match spec.hemisphere {
            Hemisphere::Both if k % 2 == 0 => Hemisphere::Left,
            Hemisphere::Both => Hemisphere::Right,
            h => h,
        };
        let radius_mm = rlo + (rhi - rlo) * rng.random::<f64>();
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let centre = g.coords(brain_voxels[rng.random_range(0..brain_voxels.len())]);
            let ball = Lesion { centre, radius_mm }.voxels(&g);
            let fits = ball.iter().all(|&c| {
                side_of(c[0], g.shape[0]) == side
                    && neighbourhood_all(&g, c, |i| brain.data[i] != 0)
                    && neighbourhood_all(&g, c, |i| lesion[i] == 0)
            });
            if fits {
                for c in ball {
                    lesion[g.index(c[0], c[1], c[2])] = 1;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::UnplaceableLesion { index: k, radius_mm });
        }
    }

    let field = smooth_bias_field(g, spec.bias_field_amplitude, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let t = spec.tissue_intensities;
    let mut data = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let base = if lesion[i] != 0 {
            t.lesion
        } else if brain.data[i] != 0 {
            t.brain
        } else {
            t.background
        };
        let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        data.push((base * field.data[i] + n).max(0.0));
    }
    let image = Volume { geom: g, data };
    let mask = Mask { geom: g, data: lesion };
    Ok(Subject::new(id, image, Some(mask)).expect("shared geometry"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::components::count_components;

    #[test]
    fn no_lesions_means_empty_mask() {
        let spec = PhantomSpec { lesion_count: 0, hemisphere: Hemisphere::None, ..Default::default() };
        let s = generate_phantom("a", &spec, 1).unwrap();
        assert!(s.mask.unwrap().is_empty());
    }

    #[test]
    fn three_lesions_three_components() {
        let spec = PhantomSpec { lesion_count: 3, hemisphere: Hemisphere::Both, ..Default::default() };
        for seed in 0..5 {
            let s = generate_phantom("a", &spec, seed).unwrap();
            assert_eq!(count_components(s.mask.as_ref().unwrap()), 3);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = PhantomSpec { bias_field_amplitude: 0.3, ..Default::default() };
        assert_eq!(generate_phantom("a", &spec, 4).unwrap(), generate_phantom("a", &spec, 4).unwrap());
        assert_ne!(generate_phantom("a", &spec, 4).unwrap(), generate_phantom("a", &spec, 5).unwrap());
    }

    #[test]
    fn oversized_lesion_is_unplaceable() {
        let spec = PhantomSpec { lesion_radius_range_mm: (60.0, 60.0), ..Default::default() };
        assert!(matches!(generate_phantom("a", &spec, 0), Err(SynthError::UnplaceableLesion { .. })));
    }

    #[test]
    fn field_has_exact_peak_to_peak() {
        let g = Geometry::new([10, 12, 8], [1.0; 3], [0.0; 3]).unwrap();
        let f = smooth_bias_field(g, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        let (lo, hi) = f.min_max().unwrap();
        assert!((hi - lo - 0.3).abs() < 1e-12);
        assert!((lo - 0.85).abs() < 1e-12);
    }

    #[test]
    fn hemisphere_none_requires_zero_lesions() {
        let spec = PhantomSpec { lesion_count: 2, hemisphere: Hemisphere::None, ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
