//! Binary cache files for preprocessed frames.
//!
//! `<id>.bev`: magic `PFBEV001`, `u32` height and width, `3·H·W` `f64`
//! channel values, `H·W` `u32` point counts.
//!
//! `<id>.vox`: magic `PFVOX001`, `u32` dims `[D, H, W]`, max points,
//! voxel count and dropped-voxel count, then per voxel its `u32` coords,
//! `u32` point count and `4·count` `f64` point fields. Point features are
//! rebuilt on load. All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::Point;
use crate::error::{Error, Result};
use crate::preprocess::{BevMap, VoxelSet};
use crate::tensor::Tensor;

const BEV_MAGIC: &[u8; 8] = b"PFBEV001";
const VOX_MAGIC: &[u8; 8] = b"PFVOX001";

pub fn bev_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.bev"))
}

pub fn voxel_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.vox"))
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: "unexpected end of file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        if self.take(8)? != m {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: "trailing bytes".into(),
            });
        }
        Ok(())
    }
}

pub fn encode_bev(map: &BevMap) -> Vec<u8> {
    let mut buf = BEV_MAGIC.to_vec();
    put_u32(&mut buf, map.height());
    put_u32(&mut buf, map.width());
    for &v in map.data.data() {
        put_f64(&mut buf, v);
    }
    for &c in &map.counts {
        put_u32(&mut buf, c as usize);
    }
    buf
}

pub fn decode_bev(bytes: &[u8], path: &Path) -> Result<BevMap> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(BEV_MAGIC)?;
    let (h, w) = (r.u32()?, r.u32()?);
    let data = (0..3 * h * w).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let counts = (0..h * w).map(|_| r.u32().map(|c| c as u32)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(BevMap {
        data: Tensor::new(&[3, h, w], data)?,
        counts,
    })
}

pub fn encode_voxels(set: &VoxelSet) -> Vec<u8> {
    let mut buf = VOX_MAGIC.to_vec();
    for d in set.dims {
        put_u32(&mut buf, d);
    }
    put_u32(&mut buf, set.max_points);
    put_u32(&mut buf, set.num_voxels());
    put_u32(&mut buf, set.dropped_voxels);
    for (c, pts) in set.coords.iter().zip(&set.points) {
        for &k in c {
            put_u32(&mut buf, k);
        }
        put_u32(&mut buf, pts.len());
        for p in pts {
            for v in [p.x, p.y, p.z, p.r] {
                put_f64(&mut buf, v);
            }
        }
    }
    buf
}

pub fn decode_voxels(bytes: &[u8], path: &Path) -> Result<VoxelSet> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(VOX_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let max_points = r.u32()?;
    let count = r.u32()?;
    let dropped = r.u32()?;
    let mut coords = Vec::with_capacity(count);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        coords.push([r.u32()?, r.u32()?, r.u32()?]);
        let n = r.u32()?;
        if n > max_points {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: r.pos as u64,
                msg: format!("voxel holds {n} points, cap is {max_points}"),
            });
        }
        let pts = (0..n)
            .map(|_| Ok(Point::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        points.push(pts);
    }
    r.finish()?;
    let mut set = VoxelSet::from_points(points, coords, dims, max_points);
    set.dropped_voxels = dropped;
    Ok(set)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_bev(path: &Path, map: &BevMap) -> Result<()> {
    write(path, &encode_bev(map))
}

pub fn read_bev(path: &Path) -> Result<BevMap> {
    decode_bev(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

pub fn write_voxels(path: &Path, set: &VoxelSet) -> Result<()> {
    write(path, &encode_voxels(set))
}

pub fn read_voxels(path: &Path) -> Result<VoxelSet> {
    decode_voxels(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::toy_voxels;
    use crate::dataset::PointCloud;
    use crate::preprocess::{encode_bev_map, GridSpec};

    #[test]
    fn voxels_round_trip() {
        let s = toy_voxels();
        let back = decode_voxels(&encode_voxels(&s), Path::new("v")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bev_round_trip_and_truncation() {
        let cloud = PointCloud::new(vec![Point::new(1.0, 0.0, -1.0, 0.5)]);
        let m = encode_bev_map(&cloud, &GridSpec::KITTI);
        let bytes = encode_bev(&m);
        assert_eq!(decode_bev(&bytes, Path::new("b")).unwrap(), m);
        assert!(decode_bev(&bytes[..bytes.len() - 1], Path::new("b")).is_err());
        assert!(decode_bev(b"PFVOX001", Path::new("b")).is_err());
    }
}
