//! Runs one forward pass of the full-width detector on a 608 × 608 input and
//! prints every stage's feature shape. The f64 tape keeps every
//! intermediate, so a sparse cloud keeps memory to about a gigabyte.
//!
//! cargo run --example shape_ladder

use std::time::Instant;

use pointfuse::dataset::{Point, PointCloud};
use pointfuse::model::{Detector, ModelConfig};
use pointfuse::preprocess::{GridSpec, VoxelSpec};
use pointfuse::rng;
use pointfuse::tensor::{Graph, ParamStore};
use rand::Rng;

fn main() -> pointfuse::Result<()> {
    env_logger::init();
    let mut r = rng::seeded(0);
    let cloud: PointCloud = (0..1_000)
        .map(|_| Point::new(r.gen_range(0.0..60.8), r.gen_range(-30.4..30.4), r.gen_range(-3.0..1.0), r.gen()))
        .collect();
    let t0 = Instant::now();
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &mut rng::seeded(1), &ModelConfig::default(), &GridSpec::KITTI, &VoxelSpec::KITTI)?;
    println!("{} parameters, stage sides {:?}", store.num_values(), det.resolutions);
    let sample = det.prepare(&cloud, &mut rng::seeded(2));
    println!("{} voxels from {} points", sample.voxels.num_voxels(), cloud.len());
    let mut g = Graph::with_params(&store);
    let fp = det.forward(&mut g, &sample, &mut rng::seeded(3))?;
    for (i, (v, p)) in fp.voxel.iter().zip(&fp.projection).enumerate() {
        println!("stage {}: voxel bev {:?}, fused {:?}", i + 1, g.shape(v.bev), g.shape(*p));
    }
    println!("neck {:?}", g.shape(fp.neck));
    println!("head cls {:?} reg {:?} dir {:?}", g.shape(fp.head.cls), g.shape(fp.head.reg), g.shape(fp.head.dir));
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
