//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Any numeric datatype is promoted to `f64`. Only axis-aligned affines are
//! accepted. The writer stores `f64` data and appends a header extension with
//! the exact double-precision spacing and origin, since the standard header
//! fields are single precision.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{io_err, Geometry, Result, Volume, VolumeError};

const HEADER_SIZE: usize = 348;
const GEOMETRY_EXT_CODE: i32 = 40;
const GEOMETRY_EXT_TAG: &str = "strokeseg-geometry";

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::MalformedHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn read_all(path: &Path, gz: bool) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    if gz {
        MultiGzDecoder::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    } else {
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
    }
    Ok(bytes)
}

/// Element size in bytes and a decoder for one element.
fn element_decoder(datatype: i16) -> Option<(usize, fn(&[u8], bool) -> f64)> {
    macro_rules! dec {
        ($t:ty) => {
            (std::mem::size_of::<$t>(), |b: &[u8], be: bool| {
                let arr = b.try_into().unwrap();
                (if be { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            })
        };
    }
    Some(match datatype {
        2 => dec!(u8),
        4 => dec!(i16),
        8 => dec!(i32),
        16 => dec!(f32),
        64 => dec!(f64),
        256 => dec!(i8),
        512 => dec!(u16),
        768 => dec!(u32),
        1024 => dec!(i64),
        1280 => dec!(u64),
        _ => return None,
    })
}

pub fn read_nifti(path: &Path, gz: bool) -> Result<Volume> {
    let bytes = read_all(path, gz)?;
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(path, format!("file is {} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(malformed(path, "sizeof_hdr is not 348")),
    };
    let h = Cursor { bytes: &bytes, big_endian };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(malformed(path, "magic is not \"n+1\" (only single-file NIfTI-1 is supported)"));
    }

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(path, format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let dims: Vec<i64> = (1..=ndim).map(|i| h.i16(40 + 2 * i) as i64).collect();
    if dims.iter().any(|&d| d < 1) {
        return Err(malformed(path, format!("non-positive dimension in {dims:?}")));
    }
    if ndim < 3 || dims[3..].iter().any(|&d| d > 1) {
        return Err(VolumeError::NotThreeD { path: path.to_path_buf(), dims: ndim });
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];

    let datatype = h.i16(70);
    let (elem, decode) = element_decoder(datatype)
        .ok_or_else(|| malformed(path, format!("unsupported datatype {datatype}")))?;
    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed(path, format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let n: usize = shape.iter().product();
    if bytes.len() < vox_offset + n * elem {
        return Err(malformed(path, "payload shorter than dim/datatype imply"));
    }

    let mut slope = h.f32(112) as f64;
    let mut inter = h.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }
    let data: Vec<f64> = bytes[vox_offset..vox_offset + n * elem]
        .chunks_exact(elem)
        .map(|c| decode(c, big_endian) * slope + inter)
        .collect();

    let geom = match read_geometry_extension(&bytes, &h, vox_offset) {
        Some((spacing, origin)) => Geometry::new(shape, spacing, origin),
        None => header_geometry(path, &h, shape)?,
    }
    .map_err(|e| malformed(path, e.to_string()))?;
    Ok(Volume { geom, data })
}

fn header_geometry(path: &Path, h: &Cursor, shape: [usize; 3]) -> Result<Result<Geometry>> {
    let pixdim: [f64; 3] = std::array::from_fn(|a| (h.f32(76 + 4 * (a + 1)) as f64).abs());
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    if sform_code > 0 {
        let row = |r: usize| -> [f64; 4] { std::array::from_fn(|c| h.f32(280 + 16 * r + 4 * c) as f64) };
        let m = [row(0), row(1), row(2)];
        let scale = (0..3).map(|i| m[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for i in 0..3 {
            for j in 0..3 {
                if i != j && m[i][j].abs() > 1e-6 * scale {
                    return Err(VolumeError::ObliqueAffine { path: path.to_path_buf() });
                }
            }
        }
        let spacing = std::array::from_fn(|a| m[a][a].abs());
        let origin = std::array::from_fn(|a| m[a][3]);
        Ok(Geometry::new(shape, spacing, origin))
    } else if qform_code > 0 {
        let (b, c, d) = (h.f32(256), h.f32(260), h.f32(264));
        if b.abs() > 1e-6 || c.abs() > 1e-6 || d.abs() > 1e-6 {
            return Err(VolumeError::ObliqueAffine { path: path.to_path_buf() });
        }
        let origin = [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64];
        Ok(Geometry::new(shape, pixdim, origin))
    } else {
        Ok(Geometry::new(shape, pixdim, [0.0; 3]))
    }
}

/// Looks for the exact-geometry extension written by [`write_nifti`].
fn read_geometry_extension(bytes: &[u8], h: &Cursor, vox_offset: usize) -> Option<([f64; 3], [f64; 3])> {
    if bytes.get(348).copied().unwrap_or(0) == 0 {
        return None;
    }
    let mut off = 352;
    while off + 8 <= vox_offset {
        let esize = h.i32(off);
        let ecode = h.i32(off + 4);
        if esize < 8 || off + esize as usize > vox_offset {
            return None;
        }
        if ecode == GEOMETRY_EXT_CODE {
            let text = std::str::from_utf8(&bytes[off + 8..off + esize as usize]).ok()?;
            let text = text.trim_end_matches('\0');
            let mut fields = text.split_whitespace();
            if fields.next()? != GEOMETRY_EXT_TAG {
                return None;
            }
            let vals: Vec<f64> = fields.map(str::parse).collect::<std::result::Result<_, _>>().ok()?;
            if vals.len() != 6 {
                return None;
            }
            return Some(([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]]));
        }
        off += esize as usize;
    }
    None
}

fn build_file(v: &Volume) -> Vec<u8> {
    let g = &v.geom;
    let mut ext_text = format!(
        "{GEOMETRY_EXT_TAG} {:?} {:?} {:?} {:?} {:?} {:?}",
        g.spacing[0], g.spacing[1], g.spacing[2], g.origin[0], g.origin[1], g.origin[2]
    )
    .into_bytes();
    let esize = (8 + ext_text.len()).div_ceil(16) * 16;
    ext_text.resize(esize - 8, 0);
    let vox_offset = HEADER_SIZE + 4 + esize;

    let mut hdr = vec![0u8; HEADER_SIZE];
    let put_i16 = |hdr: &mut [u8], off: usize, x: i16| hdr[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_i32 = |hdr: &mut [u8], off: usize, x: i32| hdr[off..off + 4].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |hdr: &mut [u8], off: usize, x: f32| hdr[off..off + 4].copy_from_slice(&x.to_le_bytes());

    put_i32(&mut hdr, 0, HEADER_SIZE as i32);
    hdr[38] = b'r';
    let dims = [3, g.shape[0] as i16, g.shape[1] as i16, g.shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut hdr, 40 + 2 * i, *d);
    }
    put_i16(&mut hdr, 70, 64);
    put_i16(&mut hdr, 72, 64);
    let pixdim = [1.0, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut hdr, 76 + 4 * i, *p);
    }
    put_f32(&mut hdr, 108, vox_offset as f32);
    put_f32(&mut hdr, 112, 1.0);
    hdr[123] = 2; // mm
    put_i16(&mut hdr, 252, 1);
    put_i16(&mut hdr, 254, 1);
    for a in 0..3 {
        put_f32(&mut hdr, 268 + 4 * a, g.origin[a] as f32);
        put_f32(&mut hdr, 280 + 16 * a + 4 * a, g.spacing[a] as f32);
        put_f32(&mut hdr, 280 + 16 * a + 12, g.origin[a] as f32);
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut out = Vec::with_capacity(vox_offset + 8 * v.data.len());
    out.extend_from_slice(&hdr);
    out.extend_from_slice(&[1, 0, 0, 0]);
    out.extend_from_slice(&(esize as i32).to_le_bytes());
    out.extend_from_slice(&GEOMETRY_EXT_CODE.to_le_bytes());
    out.extend_from_slice(&ext_text);
    debug_assert_eq!(out.len(), vox_offset);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn write_nifti(v: &Volume, path: &Path, gz: bool) -> Result<()> {
    let bytes = build_file(v);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if gz {
        let mut enc = GzEncoder::new(w, Compression::fast());
        enc.write_all(&bytes).map_err(io_err(path))?;
        enc.finish().and_then(|mut w| w.flush()).map_err(io_err(path))?;
    } else {
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(io_err(path))?;
    }
    Ok(())
}
