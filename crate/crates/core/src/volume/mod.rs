//! Volumetric image model, file I/O and data hygiene.
//!
//! Voxel data is stored x-fastest: the flat index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`, which matches the NIfTI on-disk order.

mod nifti;
mod raw;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nifti::{read_nifti, write_nifti};
pub use raw::{read_raw, write_raw};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: file not found")]
    Missing { path: PathBuf },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: non-3D payload ({dims} dimensions)")]
    NotThreeD { path: PathBuf, dims: usize },
    #[error("{path}: oblique affine (rotation/shear) is not supported")]
    ObliqueAffine { path: PathBuf },
    #[error("{path}: unsupported file type")]
    UnsupportedFormat { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("mask contains non-binary value {0}")]
    NonBinary(f64),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Grid shape, voxel spacing (mm) and origin (mm) of an axis-aligned volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolumeError::InvalidGeometry(format!(
                "shape components must be >= 1, got {shape:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing components must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self { shape, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn with_shape(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.shape[0];
        let yz = idx / self.shape[0];
        [x, yz % self.shape[1], yz / self.shape[1]]
    }

    /// `(shape - 1) * spacing` per axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.shape[a] - 1) as f64 * self.spacing[a])
    }

    /// Tolerant comparison used when pairing images with masks.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.shape == other.shape
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-6
                    && (self.origin[a] - other.origin[a]).abs() <= 1e-6
            })
    }

    pub fn ensure_matches(&self, other: &Geometry) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(VolumeError::GeometryMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub geom: Geometry,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(VolumeError::InvalidGeometry(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                geom.shape
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        Self { data: vec![value; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = geom.shape;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { geom, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { geom: self.geom, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.data.iter().filter(|v| !v.is_nan()).fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

/// Binary volume sharing its geometry with an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub geom: Geometry,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(geom: Geometry) -> Self {
        Self { data: vec![0; geom.len()], geom }
    }

    pub fn from_bits(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(VolumeError::InvalidGeometry(format!(
                "mask length {} does not match shape {:?}",
                data.len(),
                geom.shape
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(VolumeError::NonBinary(v as f64));
        }
        Ok(Self { geom, data })
    }

    /// Strict conversion: every voxel must be exactly 0 or 1.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let mut data = Vec::with_capacity(v.data.len());
        for &x in &v.data {
            if x == 0.0 {
                data.push(0);
            } else if x == 1.0 {
                data.push(1);
            } else {
                return Err(VolumeError::NonBinary(x));
            }
        }
        Ok(Self { geom: v.geom, data })
    }

    /// Voxels strictly above `threshold` become foreground.
    pub fn threshold(v: &Volume, threshold: f64) -> Self {
        Self { geom: v.geom, data: v.data.iter().map(|&x| u8::from(x > threshold)).collect() }
    }

    pub fn to_volume(&self) -> Volume {
        Volume { geom: self.geometry(), data: self.data.iter().map(|&b| b as f64).collect() }
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: Volume,
    pub mask: Option<Mask>,
}

impl Subject {
    pub fn new(id: impl Into<String>, image: Volume, mask: Option<Mask>) -> Result<Self> {
        if let Some(m) = &mask {
            image.geom.ensure_matches(&m.geometry())?;
        }
        Ok(Self { id: id.into(), image, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub nan_count: usize,
    pub extent_mm: [f64; 3],
}

/// Summary statistics; NaN voxels are counted and excluded from the moments.
pub fn volume_stats(v: &Volume) -> VolumeStats {
    let finite: Vec<f64> = v.data.iter().copied().filter(|x| !x.is_nan()).collect();
    let nan_count = v.data.len() - finite.len();
    let n = finite.len() as f64;
    let (min, max) = v.min_max().unwrap_or((f64::NAN, f64::NAN));
    let mean = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / n };
    let std = if finite.is_empty() {
        f64::NAN
    } else {
        (finite.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    VolumeStats { min, max, mean, std, nan_count, extent_mm: v.geom.extent_mm() }
}

pub fn replace_nans_with_zero(v: &Volume) -> Volume {
    v.map(|x| if x.is_nan() { 0.0 } else { x })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti { gz: bool },
    Raw,
}

fn detect_format(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::Nifti { gz: true })
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti { gz: false })
    } else if name.ends_with(".vol") || name.ends_with(".volhdr") {
        Ok(Format::Raw)
    } else {
        Err(VolumeError::UnsupportedFormat { path: path.to_path_buf() })
    }
}

/// Loads a `.nii`, `.nii.gz` or raw `.vol` volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let format = detect_format(path)?;
    match format {
        Format::Nifti { gz } => {
            if !path.exists() {
                return Err(VolumeError::Missing { path: path.to_path_buf() });
            }
            read_nifti(path, gz)
        }
        Format::Raw => read_raw(path),
    }
}

/// Writes a volume; the format follows the extension (`.nii`, `.nii.gz`, `.vol`).
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match detect_format(path)? {
        Format::Nifti { gz } => write_nifti(v, path, gz),
        Format::Raw => write_raw(v, path),
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_volume(&load_volume(path)?)
}

pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&m.to_volume(), path)
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            VolumeError::Missing { path: path.to_path_buf() }
        } else {
            VolumeError::Io { path: path.to_path_buf(), source }
        }
    }
}
