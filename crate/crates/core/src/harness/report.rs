//! Training curves, overlay images and the published-results comparison table.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::train::TrainingHistory;
use super::{HarnessError, Result};
use crate::metrics::{boundary_voxels, MetricsReport};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub dsc: f64,
    /// `2D`, `3D`, or `3D*` for averaged per-case scores.
    pub scoring: String,
    pub source: String,
}

/// Published DSC values on ATLAS v2.0 used as reference rows.
pub const PUBLISHED_DSC: [(&str, f64, &str); 16] = [
    ("X-Net", 0.313, "2D"),
    ("UNETR", 0.347, "3D"),
    ("SwinUnet", 0.448, "2D"),
    ("Residual U-Net", 0.504, "3D"),
    ("3D-ResU-Net", 0.512, "3D"),
    ("SegNet", 0.533, "2D"),
    ("PSPNet", 0.580, "2D"),
    ("Residual U-Net (ICI loss)", 0.581, "3D"),
    ("U-net Transformer", 0.583, "2D"),
    ("HarDNet", 0.591, "2D"),
    ("U-Net", 0.598, "2D"),
    ("Ensemble (PP)", 0.667, "3D*"),
    ("LKA-ED", 0.678, "3D*"),
    ("LKA-E", 0.682, "3D*"),
    ("HCSNet", 0.697, "3D*"),
    ("SQMLP-net", 0.709, "3D*"),
];

pub const RUN_ROW_NAME: &str = "this run";

/// Reference rows followed by the run's mean DSC when `metrics` has cases.
pub fn comparison_table(metrics: Option<&MetricsReport>) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = PUBLISHED_DSC
        .iter()
        .map(|&(m, d, s)| ComparisonRow { model: m.into(), dsc: d, scoring: s.into(), source: "published".into() })
        .collect();
    if let Some(dsc) = metrics.and_then(MetricsReport::mean_dsc) {
        rows.push(ComparisonRow { model: RUN_ROW_NAME.into(), dsc, scoring: "3D*".into(), source: "measured".into() });
    }
    rows
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::io(path, e)
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| io(path, e))
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    train_loss: f64,
    test_loss: Option<f64>,
    test_dsc: Option<f64>,
    test_hd95: Option<f64>,
}

const PANEL_W: u32 = 360;
const PANEL_H: u32 = 240;
const MARGIN: u32 = 24;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([200, 200, 200]);
const PANEL_COLOURS: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40])];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One panel: frame, light grid and the series; gaps where values are missing.
fn panel(img: &mut RgbImage, ox: u32, oy: u32, values: &[Option<f64>], colour: Rgb<u8>) {
    let (x0, y0) = ((ox + MARGIN) as i64, (oy + MARGIN) as i64);
    let (w, h) = ((PANEL_W - 2 * MARGIN) as i64, (PANEL_H - 2 * MARGIN) as i64);
    for k in 1..4 {
        let gy = y0 + h * k / 4;
        line(img, (x0, gy), (x0 + w, gy), GREY);
    }
    for (a, b) in [((0, 0), (w, 0)), ((w, 0), (w, h)), ((w, h), (0, h)), ((0, h), (0, 0))] {
        line(img, (x0 + a.0, y0 + a.1), (x0 + b.0, y0 + b.1), BLACK);
    }
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len();
    let px = |i: usize| x0 + if n > 1 { (i as i64 * w) / (n as i64 - 1) } else { w / 2 };
    let py = |v: f64| y0 + h - ((v - lo) / span * h as f64).round() as i64;
    let mut prev: Option<(i64, i64)> = None;
    for (i, v) in values.iter().enumerate() {
        match v.filter(|v| v.is_finite()) {
            Some(v) => {
                let p = (px(i), py(v));
                if let Some(q) = prev {
                    line(img, q, p, colour);
                }
                for d in -1..=1 {
                    line(img, (p.0 - 1, p.1 + d), (p.0 + 1, p.1 + d), colour);
                }
                prev = Some(p);
            }
            None => prev = None,
        }
    }
}

/// 2×2 panels: train loss, test loss, test DSC, test HD95 against epoch.
pub fn plot_history(history: &TrainingHistory, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(2 * PANEL_W, 2 * PANEL_H, WHITE);
    let series: [Vec<Option<f64>>; 4] = [
        history.records.iter().map(|r| Some(r.train_loss)).collect(),
        history.records.iter().map(|r| r.test_loss).collect(),
        history.records.iter().map(|r| r.test_dsc).collect(),
        history.records.iter().map(|r| r.test_hd95).collect(),
    ];
    for (k, s) in series.iter().enumerate() {
        panel(&mut img, (k as u32 % 2) * PANEL_W, (k as u32 / 2) * PANEL_H, s, PANEL_COLOURS[k]);
    }
    img.save(path).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

/// Image, ground truth, prediction and boundary comparison of the middle
/// axial slice, side by side. Boundaries: ground truth red, prediction green,
/// shared yellow.
pub fn overlay_image(image: &Volume, gt: &Mask, pred: &Mask) -> Result<RgbImage> {
    image.geom.ensure_matches(&gt.geom)?;
    image.geom.ensure_matches(&pred.geom)?;
    let [nx, ny, nz] = image.shape();
    let z = nz / 2;
    let scale = (128 / nx.max(ny)).max(1) as u32;
    let (lo, hi) = image.min_max().unwrap_or((0.0, 1.0));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let on_slice = |m: &Mask| -> Vec<bool> {
        let mut b = vec![false; nx * ny];
        for c in boundary_voxels(m).into_iter().filter(|c| c[2] == z) {
            b[c[1] * nx + c[0]] = true;
        }
        b
    };
    let (bg, bp) = (on_slice(gt), on_slice(pred));
    let tile_w = nx as u32 * scale;
    let mut img = RgbImage::new(4 * tile_w, ny as u32 * scale);
    for y in 0..ny {
        for x in 0..nx {
            let g = (((image.get(x, y, z) - lo) / range).clamp(0.0, 1.0) * 255.0).round() as u8;
            let grey = Rgb([g, g, g]);
            let tint = |on: bool, c: [u8; 3]| {
                if on {
                    Rgb([((g as u16 + c[0] as u16) / 2) as u8, ((g as u16 + c[1] as u16) / 2) as u8, ((g as u16 + c[2] as u16) / 2) as u8])
                } else {
                    grey
                }
            };
            let k = y * nx + x;
            let edge = match (bg[k], bp[k]) {
                (true, true) => Rgb([255, 255, 0]),
                (true, false) => Rgb([255, 0, 0]),
                (false, true) => Rgb([0, 255, 0]),
                _ => grey,
            };
            let tiles = [grey, tint(gt.get(x, y, z), [255, 0, 0]), tint(pred.get(x, y, z), [0, 255, 0]), edge];
            // Row 0 at the bottom.
            let py = (ny - 1 - y) as u32 * scale;
            for (t, c) in tiles.iter().enumerate() {
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(t as u32 * tile_w + x as u32 * scale + dx, py + dy, *c);
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn save_overlay(image: &Volume, gt: &Mask, pred: &Mask, path: &Path) -> Result<()> {
    overlay_image(image, gt, pred)?.save(path).map_err(|e| HarnessError::Report(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub curves_png: PathBuf,
    pub curves_csv: PathBuf,
    pub comparison_csv: PathBuf,
}

/// Writes `curves.png`, `curves.csv` and `comparison.csv` into `out_dir`.
pub fn report(history: &TrainingHistory, metrics: Option<&MetricsReport>, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let files = ReportFiles {
        curves_png: out_dir.join("curves.png"),
        curves_csv: out_dir.join("curves.csv"),
        comparison_csv: out_dir.join("comparison.csv"),
    };
    plot_history(history, &files.curves_png)?;
    let rows: Vec<CurveRow> = history
        .records
        .iter()
        .map(|r| CurveRow { epoch: r.epoch, train_loss: r.train_loss, test_loss: r.test_loss, test_dsc: r.test_dsc, test_hd95: r.test_hd95 })
        .collect();
    write_csv(&rows, &files.curves_csv)?;
    write_csv(&comparison_table(metrics), &files.comparison_csv)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::EpochRecord;
    use crate::volume::Geometry;

    fn history(n: usize) -> TrainingHistory {
        TrainingHistory {
            records: (1..=n)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    test_loss: Some(1.2 / e as f64),
                    test_dsc: Some(e as f64 / n as f64),
                    test_hd95: (e % 3 != 0).then_some(10.0 / e as f64),
                    wall_seconds: e as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn fixture_rows_present() {
        let rows = comparison_table(None);
        assert_eq!(rows.len(), PUBLISHED_DSC.len());
        assert!(rows.iter().any(|r| r.model == "SQMLP-net" && r.dsc == 0.709));
        assert!(rows.iter().all(|r| r.model != RUN_ROW_NAME));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = report(&history(20), None, dir.path()).unwrap();
        let png = image::open(&files.curves_png).unwrap();
        assert_eq!((png.width(), png.height()), (2 * PANEL_W, 2 * PANEL_H));
        let curves = std::fs::read_to_string(&files.curves_csv).unwrap();
        assert_eq!(curves.lines().count(), 21);
        let table = std::fs::read_to_string(&files.comparison_csv).unwrap();
        assert!(table.contains("SQMLP-net,0.709"));
        assert!(!table.contains(RUN_ROW_NAME));
    }

    #[test]
    fn overlay_has_four_tiles() {
        let g = Geometry::with_shape([8, 6, 4]).unwrap();
        let img = Volume::from_fn(g, |x, _, _| x as f64);
        let mut m = Mask::empty(g);
        m.data[g.index(3, 3, 2)] = 1;
        let o = overlay_image(&img, &m, &m).unwrap();
        assert_eq!((o.width(), o.height()), (4 * 8 * 16, 6 * 16));
        assert_eq!(*o.get_pixel(3 * 128 + 3 * 16, (6 - 1 - 3) * 16), Rgb([255, 255, 0]));
    }
}
