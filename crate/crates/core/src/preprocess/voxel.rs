use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::RangeSpec;
use crate::tensor::Tensor;

/// Width of the per-point geometric encoding
/// `(x, y, z, r, x_c, y_c, z_c, x_p, y_p, z_p)`.
pub const POINT_FEATURES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelSpec {
    pub range: RangeSpec,
    /// `(vx, vy, vz)` in meters.
    pub voxel_size: [f64; 3],
    pub max_voxels: usize,
    pub max_points: usize,
}

impl VoxelSpec {
    /// 0.1 × 0.1 × 0.125 m voxels (608 × 608 × 32) with 12 points each.
    pub const KITTI: VoxelSpec = VoxelSpec {
        range: RangeSpec::KITTI,
        voxel_size: [0.1, 0.1, 0.125],
        max_voxels: 20000,
        max_points: 12,
    };

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.max_voxels == 0 || self.max_points == 0 {
            return Err(Error::Config("max_voxels and max_points must be positive".into()));
        }
        for (ext, v) in self.range.extent().into_iter().zip(self.voxel_size) {
            let n = (ext / v).round();
            if !(v > 0.0) || n < 1.0 || (n * v - ext).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "voxel size {v} does not divide range extent {ext}"
                )));
            }
        }
        Ok(())
    }

    /// Grid dimensions `[D, H, W]` (z, y, x).
    pub fn dims(&self) -> [usize; 3] {
        let e = self.range.extent();
        [
            (e[2] / self.voxel_size[2]).round() as usize,
            (e[1] / self.voxel_size[1]).round() as usize,
            (e[0] / self.voxel_size[0]).round() as usize,
        ]
    }

    /// `[iz, iy, ix]` by floor division, max boundary clamped into the last
    /// voxel. `None` outside the range.
    pub fn voxel_of(&self, p: &Point) -> Option<[usize; 3]> {
        let r = &self.range;
        if !r.contains(p.x, p.y, p.z) {
            return None;
        }
        let [d, h, w] = self.dims();
        let idx = |v: f64, lo: f64, s: f64, n: usize| (((v - lo) / s).floor() as usize).min(n - 1);
        Some([
            idx(p.z, r.z_min, self.voxel_size[2], d),
            idx(p.y, r.y_min, self.voxel_size[1], h),
            idx(p.x, r.x_min, self.voxel_size[0], w),
        ])
    }
}

/// Dense, zero-padded voxel batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSet {
    /// `(10, V, N)`.
    pub features: Tensor,
    /// `[iz, iy, ix]` per voxel.
    pub coords: Vec<[usize; 3]>,
    pub counts: Vec<usize>,
    /// Retained raw points per voxel, in slot order.
    pub points: Vec<Vec<Point>>,
    pub dims: [usize; 3],
    pub max_points: usize,
    /// Non-empty voxels beyond `max_voxels`.
    pub dropped_voxels: usize,
}

impl VoxelSet {
    pub fn num_voxels(&self) -> usize {
        self.coords.len()
    }

    /// Real-slot mask of length `V · N`.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.max_points;
        let mut m = vec![false; self.num_voxels() * n];
        for (v, &c) in self.counts.iter().enumerate() {
            m[v * n..v * n + c].fill(true);
        }
        m
    }

    /// Builds the padded feature tensor for per-voxel point lists, with
    /// centres taken as the mean of each list.
    pub fn from_points(points: Vec<Vec<Point>>, coords: Vec<[usize; 3]>, dims: [usize; 3], max_points: usize) -> Self {
        let v_count = points.len();
        let n = max_points;
        let mut data = vec![0.0; POINT_FEATURES * v_count * n];
        for (v, pts) in points.iter().enumerate() {
            debug_assert!(pts.len() <= n);
            let c = centroid(pts);
            for (k, p) in pts.iter().enumerate() {
                for (ch, val) in point_features(p, c).into_iter().enumerate() {
                    data[ch * v_count * n + v * n + k] = val;
                }
            }
        }
        Self {
            features: Tensor::new(&[POINT_FEATURES, v_count, n], data).expect("consistent shape"),
            counts: points.iter().map(Vec::len).collect(),
            coords,
            points,
            dims,
            max_points,
            dropped_voxels: 0,
        }
    }
}

fn centroid(pts: &[Point]) -> [f64; 3] {
    if pts.is_empty() {
        return [0.0; 3];
    }
    let n = pts.len() as f64;
    let s = pts.iter().fold([0.0; 3], |a, p| [a[0] + p.x, a[1] + p.y, a[2] + p.z]);
    [s[0] / n, s[1] / n, s[2] / n]
}

pub fn point_features(p: &Point, c: [f64; 3]) -> [f64; POINT_FEATURES] {
    [p.x, p.y, p.z, p.r, c[0], c[1], c[2], p.x - c[0], p.y - c[1], p.z - c[2]]
}

/// Hard voxelization. Voxels are kept in first-encounter order; voxels
/// holding more than `max_points` points are subsampled with `rng`, keeping
/// the retained points in input order.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelSpec, rng: &mut impl Rng) -> VoxelSet {
    let mut slot: HashMap<[usize; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut members: Vec<Vec<Point>> = Vec::new();
    let mut dropped: HashSet<[usize; 3]> = HashSet::new();
    for p in cloud.iter() {
        let Some(key) = spec.voxel_of(p) else {
            continue;
        };
        match slot.get(&key) {
            Some(&v) => members[v].push(*p),
            None if coords.len() < spec.max_voxels => {
                slot.insert(key, coords.len());
                coords.push(key);
                members.push(vec![*p]);
            }
            None => {
                dropped.insert(key);
            }
        }
    }
    if !dropped.is_empty() {
        log::debug!("voxelize: {} voxels over the cap of {}", dropped.len(), spec.max_voxels);
    }
    let n = spec.max_points;
    for pts in &mut members {
        if pts.len() > n {
            let mut keep = sample(rng, pts.len(), n).into_vec();
            keep.sort_unstable();
            *pts = keep.into_iter().map(|i| pts[i]).collect();
        }
    }
    let mut set = VoxelSet::from_points(members, coords, spec.dims(), n);
    set.dropped_voxels = dropped.len();
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn kitti_dims() {
        VoxelSpec::KITTI.validate().unwrap();
        assert_eq!(VoxelSpec::KITTI.dims(), [32, 608, 608]);
    }

    #[test]
    fn single_point_is_its_own_centre() {
        let p = Point::new(10.03, 1.02, -1.5, 0.4);
        let vs = voxelize(&PointCloud::new(vec![p]), &VoxelSpec::KITTI, &mut rng::seeded(0));
        assert_eq!(vs.features.shape(), &[10, 1, 12]);
        let f = vs.features.data();
        let at = |ch: usize| f[ch * 12];
        assert_eq!([at(4), at(5), at(6)], [p.x, p.y, p.z]);
        assert_eq!([at(7), at(8), at(9)], [0.0; 3]);
        assert_eq!(f.iter().filter(|v| **v != 0.0).count(), 7);
    }

    #[test]
    fn overfull_voxel_keeps_a_subset() {
        let pts: Vec<Point> = (0..30).map(|i| Point::new(5.0 + 0.001 * i as f64, 0.05, -1.0, 0.01 * i as f64)).collect();
        let vs = voxelize(&PointCloud::new(pts.clone()), &VoxelSpec::KITTI, &mut rng::seeded(3));
        assert_eq!(vs.counts, vec![12]);
        for p in &vs.points[0] {
            assert!(pts.contains(p));
        }
        let order: Vec<f64> = vs.points[0].iter().map(|p| p.r).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn voxel_cap_counts_overflow() {
        let spec = VoxelSpec {
            max_voxels: 2,
            ..VoxelSpec::KITTI
        };
        let pts: Vec<Point> = (0..5).map(|i| Point::new(1.0 + i as f64, 0.0, 0.0, 0.0)).collect();
        let vs = voxelize(&PointCloud::new(pts), &spec, &mut rng::seeded(0));
        assert_eq!(vs.num_voxels(), 2);
        assert_eq!(vs.dropped_voxels, 3);
        assert_eq!(vs.coords[0][2], 10);
    }
}
