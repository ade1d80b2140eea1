//! Overlap and boundary-distance metrics for binary segmentations.

mod distance;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use distance::squared_distance_to;

use crate::volume::{Mask, VolumeError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Geometry(#[from] VolumeError),
    #[error("{}: {source}", path.display())]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.geom.ensure_matches(&gt.geom)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += (a != 0) as usize;
        g += (b != 0) as usize;
        both += (a != 0 && b != 0) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Foreground voxels with a background or out-of-bounds face neighbour.
pub fn boundary_voxels(m: &Mask) -> Vec<[usize; 3]> {
    let flags = boundary_flags(m);
    flags.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| m.geom.coords(i)).collect()
}

fn boundary_flags(m: &Mask) -> Vec<bool> {
    let [nx, ny, nz] = m.shape();
    let mut out = vec![false; m.data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = m.geom.index(x, y, z);
                if m.data[i] == 0 {
                    continue;
                }
                let on = |x: usize, y: usize, z: usize| m.data[m.geom.index(x, y, z)] != 0;
                out[i] = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !on(x - 1, y, z)
                    || !on(x + 1, y, z)
                    || !on(x, y - 1, z)
                    || !on(x, y + 1, z)
                    || !on(x, y, z - 1)
                    || !on(x, y, z + 1);
            }
        }
    }
    out
}

/// Distances in mm from every boundary voxel of each mask to the other
/// mask's boundary, both directions pooled. `None` if either boundary is empty.
pub fn directed_boundary_distances(pred: &Mask, gt: &Mask) -> Result<Option<Vec<f64>>> {
    pred.geom.ensure_matches(&gt.geom)?;
    let bp = boundary_flags(pred);
    let bg = boundary_flags(gt);
    if !bp.iter().any(|&b| b) || !bg.iter().any(|&b| b) {
        return Ok(None);
    }
    let shape = pred.shape();
    let spacing = pred.geom.spacing;
    let to_g = squared_distance_to(&bg, shape, spacing);
    let to_p = squared_distance_to(&bp, shape, spacing);
    let mut d: Vec<f64> = bp.iter().zip(&to_g).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()).collect();
    d.extend(bg.iter().zip(&to_p).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()));
    Ok(Some(d))
}

/// Percentile `p` in [0, 100] by linear interpolation at rank `p/100 · (n-1)`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

pub fn hd95(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    Ok(directed_boundary_distances(pred, gt)?.and_then(|d| percentile(&d, 95.0)))
}

pub fn assd(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    Ok(directed_boundary_distances(pred, gt)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dsc: f64,
    /// `None` when either boundary is empty.
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub pred_voxels: usize,
    pub gt_voxels: usize,
}

pub fn evaluate_case(pred: &Mask, gt: &Mask) -> Result<CaseMetrics> {
    let dsc = dice_score(pred, gt)?;
    let d = directed_boundary_distances(pred, gt)?;
    Ok(CaseMetrics {
        dsc,
        hd95_mm: d.as_ref().and_then(|d| percentile(d, 95.0)),
        assd_mm: d.map(|d| d.iter().sum::<f64>() / d.len() as f64),
        pred_voxels: pred.count(),
        gt_voxels: gt.count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, median: percentile(values, 50.0).expect("non-empty"), std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub dsc: Option<Summary>,
    pub hd95_mm: Option<Summary>,
    pub assd_mm: Option<Summary>,
    /// Cases whose distance metrics are undefined.
    pub undefined_distance_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseRow>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    pub fn new(cases: Vec<CaseRow>) -> Self {
        let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> {
            cases.iter().filter_map(|c| f(&c.metrics)).collect()
        };
        let aggregates = Aggregates {
            dsc: Summary::of(&col(&|m| Some(m.dsc))),
            hd95_mm: Summary::of(&col(&|m| m.hd95_mm)),
            assd_mm: Summary::of(&col(&|m| m.assd_mm)),
            undefined_distance_cases: cases.iter().filter(|c| c.metrics.hd95_mm.is_none()).count(),
        };
        Self { cases, aggregates }
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn mean_dsc(&self) -> Option<f64> {
        self.aggregates.dsc.as_ref().map(|s| s.mean)
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        self.aggregates.hd95_mm.as_ref().map(|s| s.mean)
    }

    /// One row per case; undefined distances are written as `NA`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["id", "dsc", "hd95_mm", "assd_mm", "pred_voxels", "gt_voxels"])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        for c in &self.cases {
            let m = &c.metrics;
            w.write_record([
                c.id.clone(),
                m.dsc.to_string(),
                opt(m.hd95_mm),
                opt(m.assd_mm),
                m.pred_voxels.to_string(),
                m.gt_voxels.to_string(),
            ])?;
        }
        w.flush().map_err(|e| MetricsError::Csv(e.into()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path, e| MetricsError::Io { path: path.to_path_buf(), source: e };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let csv_path = dir.join("metrics.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| io(&csv_path, e))?;
        self.write_csv(f)?;
        let json_path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(&json_path, text).map_err(|e| io(&json_path, e))
    }
}
