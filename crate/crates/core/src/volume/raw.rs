//! Raw sidecar format: `<name>.vol` holds little-endian `f64` voxels in
//! x-fastest order, `<name>.volhdr` holds three text lines
//! (`shape`, `spacing`, `origin`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, Geometry, Result, Volume, VolumeError};

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let data = path.with_extension("vol");
    let header = path.with_extension("volhdr");
    (data, header)
}

fn parse_line<T: std::str::FromStr>(path: &Path, line: Option<&str>, key: &str) -> Result<[T; 3]> {
    let bad = |reason: String| VolumeError::MalformedHeader { path: path.to_path_buf(), reason };
    let line = line.ok_or_else(|| bad(format!("missing `{key}` line")))?;
    let mut fields = line.split_whitespace().peekable();
    if fields.peek() == Some(&key) {
        fields.next();
    }
    let vals: Vec<T> = fields
        .map(|f| f.parse::<T>().map_err(|_| bad(format!("cannot parse `{f}` in `{key}` line"))))
        .collect::<Result<_>>()?;
    let n = vals.len();
    vals.try_into().map_err(|_| {
        if key == "shape" {
            VolumeError::NotThreeD { path: path.to_path_buf(), dims: n }
        } else {
            bad(format!("`{key}` needs 3 values, found {n}"))
        }
    })
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let (data_path, header_path) = paths(path);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let shape: [usize; 3] = parse_line(&header_path, lines.next(), "shape")?;
    let spacing: [f64; 3] = parse_line(&header_path, lines.next(), "spacing")?;
    let origin: [f64; 3] = parse_line(&header_path, lines.next(), "origin")?;
    let geom = Geometry::new(shape, spacing, origin).map_err(|e| VolumeError::MalformedHeader {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;

    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    if bytes.len() != geom.len() * 8 {
        return Err(VolumeError::MalformedHeader {
            path: data_path,
            reason: format!("expected {} bytes of f64 data, found {}", geom.len() * 8, bytes.len()),
        });
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Volume { geom, data })
}

pub fn write_raw(v: &Volume, path: &Path) -> Result<()> {
    let (data_path, header_path) = paths(path);
    let g = &v.geom;
    let header = format!(
        "shape {} {} {}\nspacing {:?} {:?} {:?}\norigin {:?} {:?} {:?}\n",
        g.shape[0], g.shape[1], g.shape[2], g.spacing[0], g.spacing[1], g.spacing[2], g.origin[0], g.origin[1], g.origin[2]
    );
    let bytes: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(&data_path, bytes).map_err(io_err(&data_path))?;
    fs::write(&header_path, header).map_err(io_err(&header_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_cubed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fixture.vol");
        fs::write(dir.path().join("fixture.volhdr"), "shape 4 4 4\nspacing 1 1 1\norigin 0 0 0\n").unwrap();
        let bytes: Vec<u8> = (0..64).flat_map(|i| (i as f64).to_le_bytes()).collect();
        fs::write(&p, bytes).unwrap();
        let v = read_raw(&p).unwrap();
        assert_eq!(v.geom.shape, [4, 4, 4]);
        assert_eq!(v.get(1, 2, 3), (1 + 4 * 2 + 16 * 3) as f64);
    }

    #[test]
    fn unlabelled_header_lines_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bare.vol");
        fs::write(dir.path().join("bare.volhdr"), "2 1 1\n0.5 1 1\n0 0 0\n").unwrap();
        fs::write(&p, [1.0f64, 2.0].iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        assert_eq!(read_raw(&p).unwrap().geom.spacing, [0.5, 1.0, 1.0]);
    }

    #[test]
    fn two_dimensional_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.vol");
        fs::write(dir.path().join("flat.volhdr"), "shape 4 4\nspacing 1 1 1\norigin 0 0 0\n").unwrap();
        fs::write(&p, vec![0u8; 16 * 8]).unwrap();
        assert!(matches!(read_raw(&p), Err(VolumeError::NotThreeD { dims: 2, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_raw(Path::new("/nonexistent/x.vol")).unwrap_err();
        assert!(matches!(err, VolumeError::Missing { .. }));
        assert!(err.to_string().contains("x.volhdr"));
    }
}
