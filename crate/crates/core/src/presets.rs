//! Ready-made grid and scene settings.

use crate::geometry::RangeSpec;
use crate::head::AnchorClass;
use crate::preprocess::{GridSpec, VoxelSpec};
use crate::synthetic::SceneConfig;

/// 25.6 m × 25.6 m in front of the sensor.
pub const TOY_RANGE: RangeSpec = RangeSpec {
    x_min: 0.0,
    x_max: 25.6,
    y_min: -12.8,
    y_max: 12.8,
    z_min: -3.0,
    z_max: 1.0,
};

/// 128 × 128 BEV cells of 0.2 m, matching voxels with 32 vertical bins,
/// and car-only scenes of one to three objects.
pub fn toy_grids() -> (GridSpec, VoxelSpec, SceneConfig) {
    let grid = GridSpec {
        range: TOY_RANGE,
        cell: [0.2, 0.2],
    };
    let voxels = VoxelSpec {
        range: TOY_RANGE,
        voxel_size: [0.2, 0.2, 0.125],
        max_voxels: 20000,
        max_points: 8,
    };
    let scene = SceneConfig {
        range: TOY_RANGE,
        classes: vec![AnchorClass::car()],
        min_objects: 1,
        max_objects: 3,
        points_per_object: 300,
        ground_points: 1500,
        size_jitter: 0.05,
        margin: 3.0,
    };
    (grid, voxels, scene)
}

/// Full-size 608 × 608 grid with 0.1 m × 0.1 m × 0.125 m voxels.
pub fn kitti_grids() -> (GridSpec, VoxelSpec) {
    (GridSpec::KITTI, VoxelSpec::KITTI)
}
