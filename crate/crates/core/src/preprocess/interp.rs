//! Point sampling, resampling to a new spacing and resizing to a new shape.

use serde::{Deserialize, Serialize};

use super::{PreprocessError, Result};
use crate::volume::{Geometry, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Linear,
}

/// What to return for points outside the voxel-centre hull.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Snap to the nearest edge voxel.
    Clamp,
    /// Return a constant.
    Fill(f64),
}

const HULL_TOL: f64 = 1e-9;

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.signum() * (x.abs() + 0.5).floor()
}

/// Samples `v` at continuous voxel index `p` (x, y, z).
pub fn sample(v: &Volume, p: [f64; 3], interp: Interpolation, boundary: Boundary) -> f64 {
    let shape = v.shape();
    if let Boundary::Fill(fill) = boundary {
        if (0..3).any(|a| p[a] < -HULL_TOL || p[a] > (shape[a] - 1) as f64 + HULL_TOL) {
            return fill;
        }
    }
    let clamp = |a: usize, x: f64| x.clamp(0.0, (shape[a] - 1) as f64);
    match interp {
        Interpolation::Nearest => {
            let i: [usize; 3] = std::array::from_fn(|a| round_half_away(clamp(a, p[a])) as usize);
            v.get(i[0], i[1], i[2])
        }
        Interpolation::Linear => {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut t = [0.0; 3];
            for a in 0..3 {
                let x = clamp(a, p[a]);
                let f = x.floor();
                lo[a] = f as usize;
                hi[a] = (lo[a] + 1).min(shape[a] - 1);
                t[a] = x - f;
            }
            let mut acc = 0.0;
            for corner in 0..8 {
                let pick = [corner & 1 != 0, corner & 2 != 0, corner & 4 != 0];
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    if pick[a] {
                        w *= t[a];
                        idx[a] = hi[a];
                    } else {
                        w *= 1.0 - t[a];
                        idx[a] = lo[a];
                    }
                }
                if w != 0.0 {
                    acc += w * v.get(idx[0], idx[1], idx[2]);
                }
            }
            acc
        }
    }
}

/// Shape after resampling: `round(shape * spacing / target)`, at least 1.
pub fn resampled_shape(geom: &Geometry, target_spacing: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| {
        let n = round_half_away(geom.shape[a] as f64 * geom.spacing[a] / target_spacing[a]);
        (n as usize).max(1)
    })
}

/// Resamples onto a grid with `target_spacing` whose field of view is centred
/// on the input's. Edges are clamped.
pub fn resample(v: &Volume, target_spacing: [f64; 3], interp: Interpolation) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(PreprocessError::InvalidConfig(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    let g = v.geom;
    let shape = resampled_shape(&g, target_spacing);
    let origin: [f64; 3] = std::array::from_fn(|a| {
        let centre = g.origin[a] + 0.5 * (g.shape[a] - 1) as f64 * g.spacing[a];
        centre - 0.5 * (shape[a] - 1) as f64 * target_spacing[a]
    });
    let out_geom = Geometry::new(shape, target_spacing, origin)?;
    Ok(Volume::from_fn(out_geom, |x, y, z| {
        let i = [x, y, z];
        let p: [f64; 3] =
            std::array::from_fn(|a| (origin[a] + i[a] as f64 * target_spacing[a] - g.origin[a]) / g.spacing[a]);
        sample(v, p, interp, Boundary::Clamp)
    }))
}

/// Resizes to `target_shape` with corner voxels aligned; spacing is rescaled
/// so that `(shape - 1) * spacing` is unchanged.
pub fn resize(v: &Volume, target_shape: [usize; 3], interp: Interpolation) -> Result<Volume> {
    if target_shape.contains(&0) {
        return Err(PreprocessError::InvalidConfig(format!("target shape must be positive, got {target_shape:?}")));
    }
    let g = v.geom;
    if target_shape == g.shape {
        return Ok(v.clone());
    }
    // Index scale from output to input; a single output voxel sits at the centre.
    let step: [f64; 3] = std::array::from_fn(|a| {
        if target_shape[a] > 1 {
            (g.shape[a] - 1) as f64 / (target_shape[a] - 1) as f64
        } else {
            0.0
        }
    });
    let spacing: [f64; 3] = std::array::from_fn(|a| {
        if target_shape[a] > 1 && g.shape[a] > 1 {
            g.spacing[a] * step[a]
        } else {
            g.spacing[a] * g.shape[a] as f64 / target_shape[a] as f64
        }
    });
    let start: [f64; 3] = std::array::from_fn(|a| if target_shape[a] > 1 { 0.0 } else { 0.5 * (g.shape[a] - 1) as f64 });
    let origin: [f64; 3] = std::array::from_fn(|a| g.origin[a] + start[a] * g.spacing[a]);
    let out_geom = Geometry::new(target_shape, spacing, origin)?;
    Ok(Volume::from_fn(out_geom, |x, y, z| {
        let i = [x, y, z];
        let p: [f64; 3] = std::array::from_fn(|a| start[a] + i[a] as f64 * step[a]);
        sample(v, p, interp, Boundary::Clamp)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], spacing: [f64; 3], f: impl FnMut(usize, usize, usize) -> f64) -> Volume {
        Volume::from_fn(Geometry::new(shape, spacing, [0.0; 3]).unwrap(), f)
    }

    #[test]
    fn halving_resolution_halves_shape() {
        let v = vol([32; 3], [1.0; 3], |x, _, _| x as f64);
        let r = resample(&v, [2.0; 3], Interpolation::Linear).unwrap();
        assert_eq!(r.shape(), [16; 3]);
        assert_eq!(r.geom.spacing, [2.0; 3]);
    }

    #[test]
    fn constant_stays_constant() {
        let v = vol([7, 9, 5], [1.3, 0.7, 2.0], |_, _, _| 7.0);
        for t in [[0.5, 1.0, 3.1], [2.0; 3]] {
            let r = resample(&v, t, Interpolation::Linear).unwrap();
            assert!(r.data.iter().all(|&x| (x - 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let v = vol([9; 3], [1.0; 3], |x, y, z| ((x + y * z) % 3 == 0) as u8 as f64);
        let r = resample(&v, [0.7, 1.9, 1.1], Interpolation::Nearest).unwrap();
        assert!(r.data.iter().all(|&x| x == 0.0 || x == 1.0));
        let r = resize(&v, [13, 4, 20], Interpolation::Nearest).unwrap();
        assert!(r.data.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn resize_to_own_shape_is_identity() {
        let v = vol([5, 6, 7], [1.0, 2.0, 3.0], |x, y, z| (x * 31 + y * 7 + z) as f64 * 0.1);
        assert_eq!(resize(&v, [5, 6, 7], Interpolation::Linear).unwrap(), v);
    }

    #[test]
    fn resize_keeps_extent() {
        let v = vol([20; 3], [1.5; 3], |x, _, _| x as f64);
        let r = resize(&v, [32; 3], Interpolation::Linear).unwrap();
        assert_eq!(r.shape(), [32; 3]);
        for a in 0..3 {
            assert!((r.geom.extent_mm()[a] - v.geom.extent_mm()[a]).abs() < 1e-9);
        }
        // linear ramps are reproduced exactly
        assert!((r.get(31, 0, 0) - 19.0).abs() < 1e-12);
        assert!((r.get(16, 3, 3) - 16.0 * 19.0 / 31.0).abs() < 1e-12);
    }

    #[test]
    fn zero_target_rejected() {
        let v = vol([4; 3], [1.0; 3], |_, _, _| 0.0);
        assert!(resize(&v, [4, 0, 4], Interpolation::Linear).is_err());
        assert!(resample(&v, [1.0, 0.0, 1.0], Interpolation::Linear).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(2.4999), 2.0);
    }
}
