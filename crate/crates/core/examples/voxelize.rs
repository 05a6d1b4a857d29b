//! Voxelizes a synthetic scene, prints occupancy statistics and checks the
//! binary cache round trip.
//!
//! cargo run --example voxelize

use std::path::Path;

use pointfuse::cache;
use pointfuse::preprocess::{point_features, voxelize, VoxelSpec};
use pointfuse::rng;
use pointfuse::synthetic::{generate_scene, SceneConfig};

fn main() -> pointfuse::Result<()> {
    let (cloud, _) = generate_scene(&SceneConfig::default(), "demo", &mut rng::seeded(7))?;
    let spec = VoxelSpec::KITTI;
    let set = voxelize(&cloud, &spec, &mut rng::frame_voxelizer(0, "demo"));
    println!("grid {:?}, {} voxels, {} dropped", set.dims, set.num_voxels(), set.dropped_voxels);
    println!("features {:?}", set.features.shape());

    let mut hist = vec![0usize; spec.max_points + 1];
    for &c in &set.counts {
        hist[c] += 1;
    }
    for (n, v) in hist.iter().enumerate().skip(1) {
        println!("  {n:>2} points: {v} voxels");
    }

    // Decorated features of the fullest voxel's first point.
    let full = (0..set.num_voxels()).max_by_key(|&i| set.counts[i]).unwrap();
    let pts = &set.points[full];
    let n = pts.len() as f64;
    let mean = [
        pts.iter().map(|p| p.x).sum::<f64>() / n,
        pts.iter().map(|p| p.y).sum::<f64>() / n,
        pts.iter().map(|p| p.z).sum::<f64>() / n,
    ];
    println!("voxel {:?}: first point features {:.3?}", set.coords[full], point_features(&pts[0], mean));

    let bytes = cache::encode_voxels(&set);
    let back = cache::decode_voxels(&bytes, Path::new("demo.vox"))?;
    println!("cache: {} bytes, round trip {}", bytes.len(), if back == set { "exact" } else { "MISMATCH" });
    Ok(())
}
