//! Iterative multiplicative bias-field estimation in the log domain.

use serde::{Deserialize, Serialize};

use super::{PreprocessError, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasCorrectionConfig {
    pub max_iterations: usize,
    /// Standard deviation of the Gaussian smoother, in millimetres.
    pub smoothing_scale_mm: f64,
    /// Stop once the largest per-iteration change of the log field is below this.
    pub convergence_tol: f64,
    /// Offset inside the logarithm.
    pub epsilon: f64,
    /// Voxels above this fraction of the maximum intensity (and above
    /// `epsilon`) form the support on which the field is estimated.
    pub foreground_fraction: f64,
}

impl Default for BiasCorrectionConfig {
    fn default() -> Self {
        Self { max_iterations: 50, smoothing_scale_mm: 40.0, convergence_tol: 1e-3, epsilon: 1e-6, foreground_fraction: 0.1 }
    }
}

impl BiasCorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations >= 1
            && self.smoothing_scale_mm > 0.0
            && self.convergence_tol > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.foreground_fraction);
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::InvalidConfig(format!("invalid bias correction settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasCorrection {
    pub corrected: Volume,
    /// Strictly positive multiplicative field with mean 1 over the support.
    pub field: Volume,
    pub iterations: usize,
    pub converged: bool,
}

/// Index into `0..n` for an arbitrary offset under half-sample symmetric
/// reflection (`.. 1 0 | 0 1 .. n-1 | n-1 n-2 ..`).
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn gaussian_kernel(sigma_vox: f64, n: usize) -> Vec<f64> {
    // Wider than 3 sigma or twice the axis length buys nothing under reflection.
    let radius = ((3.0 * sigma_vox).ceil() as usize).min(2 * n).max(1);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing with standard deviation `sigma_mm`, reflect boundary.
pub fn gaussian_smooth(v: &Volume, sigma_mm: f64) -> Volume {
    let g = v.geom;
    let mut data = v.data.clone();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = g.shape[axis];
        if n == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma_mm / g.spacing[axis], n);
        let radius = (kernel.len() / 2) as isize;
        let stride = match axis {
            0 => 1,
            1 => g.shape[0],
            _ => g.shape[0] * g.shape[1],
        };
        let [o1, o2] = match axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        for j in 0..g.shape[o2] {
            for i in 0..g.shape[o1] {
                let mut c = [0usize; 3];
                c[o1] = i;
                c[o2] = j;
                let base = g.index(c[0], c[1], c[2]);
                line.clear();
                line.extend((0..n).map(|t| data[base + t * stride]));
                for t in 0..n {
                    let mut acc = 0.0;
                    for (q, &w) in kernel.iter().enumerate() {
                        acc += w * line[reflect(t as isize + q as isize - radius, n)];
                    }
                    data[base + t * stride] = acc;
                }
            }
        }
    }
    Volume { geom: g, data }
}

/// Removes a smooth multiplicative field.
///
/// On the support the log image is repeatedly smoothed (normalised by the
/// smoothed support indicator so the background does not leak in), the
/// zero-mean smooth part is moved into the log field, and the loop stops
/// when the largest change falls below the tolerance. The exponentiated
/// field is scaled to mean 1 over the support and divided out.
pub fn bias_field_correct(v: &Volume, cfg: &BiasCorrectionConfig) -> Result<BiasCorrection> {
    cfg.validate()?;
    if let Some(&bad) = v.data.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(PreprocessError::InvalidInput(format!("intensities must be finite and non-negative, found {bad}")));
    }
    let max = v.data.iter().copied().fold(0.0, f64::max);
    let threshold = (cfg.foreground_fraction * max).max(cfg.epsilon);
    let support: Vec<bool> = v.data.iter().map(|&x| x > threshold).collect();
    let count = support.iter().filter(|&&s| s).count();
    if max <= cfg.epsilon || count == 0 {
        return Err(PreprocessError::DegenerateInput("no voxels above the foreground threshold".into()));
    }

    let g = v.geom;
    let indicator = Volume { geom: g, data: support.iter().map(|&s| s as u8 as f64).collect() };
    let weight = gaussian_smooth(&indicator, cfg.smoothing_scale_mm);
    let log_v: Vec<f64> = v.data.iter().map(|&x| (x + cfg.epsilon).ln()).collect();
    let mut log_field = vec![0.0; v.data.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let residual = Volume {
            geom: g,
            data: (0..log_v.len()).map(|i| if support[i] { log_v[i] - log_field[i] } else { 0.0 }).collect(),
        };
        let smooth = gaussian_smooth(&residual, cfg.smoothing_scale_mm);
        let mut update: Vec<f64> =
            smooth.data.iter().zip(&weight.data).map(|(&s, &w)| if w > 1e-12 { s / w } else { 0.0 }).collect();
        let mean = (0..update.len()).filter(|&i| support[i]).map(|i| update[i]).sum::<f64>() / count as f64;
        update.iter_mut().for_each(|u| *u -= mean);
        let mut largest: f64 = 0.0;
        for i in 0..update.len() {
            log_field[i] += update[i];
            if support[i] {
                largest = largest.max(update[i].abs());
            }
        }
        if largest < cfg.convergence_tol {
            converged = true;
            break;
        }
    }

    let field: Vec<f64> = log_field.iter().map(|f| f.exp()).collect();
    let scale = (0..field.len()).filter(|&i| support[i]).map(|i| field[i]).sum::<f64>() / count as f64;
    let field = Volume { geom: g, data: field.iter().map(|f| f / scale).collect() };
    let corrected = Volume { geom: g, data: v.data.iter().zip(&field.data).map(|(x, f)| x / f).collect() };
    Ok(BiasCorrection { corrected, field, iterations, converged })
}
