//! Range filtering, BEV-map encoding, hard voxelization and augmentation.

mod augment;
mod bev;
mod voxel;

pub use augment::{augment_scene, flip_scene, scale_scene, AugmentParams};
pub use bev::{encode_bev_map, BevMap, GridSpec, DENSITY_SATURATION};
pub use voxel::{point_features, voxelize, VoxelSet, VoxelSpec, POINT_FEATURES};

use crate::dataset::PointCloud;
use crate::geometry::RangeSpec;

/// Keeps points inside the closed range, preserving order.
pub fn filter_range(cloud: &PointCloud, range: &RangeSpec) -> PointCloud {
    cloud.iter().filter(|p| range.contains(p.x, p.y, p.z)).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;

    #[test]
    fn kitti_bounds() {
        let c = PointCloud::new(vec![
            Point::new(0.0, 0.0, 0.0, 0.1),
            Point::new(61.0, 0.0, 0.0, 0.1),
            Point::new(60.8, 30.4, 1.0, 0.2),
            Point::new(1.0, 0.0, -3.01, 0.1),
        ]);
        let f = filter_range(&c, &RangeSpec::KITTI);
        assert_eq!(f.points, vec![c.points[0], c.points[2]]);
    }
}
