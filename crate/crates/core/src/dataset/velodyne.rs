use std::fs;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

const RECORD: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct VelodyneScan {
    pub cloud: PointCloud,
    /// Records dropped for holding NaN or infinite values.
    pub rejected: usize,
}

/// Decodes `(x, y, z, r)` little-endian `f32` records.
pub fn decode_velodyne(bytes: &[u8], path: &Path) -> Result<VelodyneScan> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            msg: format!("truncated record: {} bytes is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    let mut rejected = 0;
    for rec in bytes.chunks_exact(RECORD) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        let p = Point::new(f(0), f(1), f(2), f(3));
        if p.is_finite() {
            points.push(p);
        } else {
            rejected += 1;
        }
    }
    Ok(VelodyneScan {
        cloud: PointCloud::new(points),
        rejected,
    })
}

pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let scan = decode_velodyne(&bytes, path)?;
    if scan.rejected > 0 {
        log::warn!("{}: dropped {} non-finite points", path.display(), scan.rejected);
    }
    Ok(scan.cloud)
}

/// Values are narrowed to `f32`.
pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_velodyne(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_empty() {
        let p = Path::new("mem");
        let one = decode_velodyne(&[0u8; 16], p).unwrap();
        assert_eq!(one.cloud.points, vec![Point::new(0.0, 0.0, 0.0, 0.0)]);
        assert!(decode_velodyne(&[], p).unwrap().cloud.is_empty());
    }

    #[test]
    fn truncated_reports_offset() {
        match decode_velodyne(&[0u8; 37], Path::new("x.bin")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_points_are_counted() {
        let mut bytes = vec![0u8; 48];
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        bytes[44..48].copy_from_slice(&f32::INFINITY.to_le_bytes());
        let scan = decode_velodyne(&bytes, Path::new("m")).unwrap();
        assert_eq!(scan.cloud.len(), 1);
        assert_eq!(scan.rejected, 2);
    }
}
