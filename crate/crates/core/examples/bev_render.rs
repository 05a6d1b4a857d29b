//! Generates one synthetic scene, rasterizes it into the three-channel BEV
//! map and saves it as a PNG.
//!
//! cargo run --example bev_render -- [out.png] [seed]

use std::path::PathBuf;

use pointfuse::preprocess::{encode_bev_map, GridSpec};
use pointfuse::rng;
use pointfuse::synthetic::{generate_scene, SceneConfig};

fn main() -> pointfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "bev.png".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let (cloud, ann) = generate_scene(&SceneConfig::default(), "demo", &mut rng::seeded(seed))?;
    let map = encode_bev_map(&cloud, &GridSpec::KITTI);
    let occupied = map.counts.iter().filter(|&&c| c > 0).count();
    println!(
        "{} points, {} objects, {occupied} of {} cells occupied",
        cloud.len(),
        ann.objects.len(),
        map.counts.len()
    );
    map.write_png(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
