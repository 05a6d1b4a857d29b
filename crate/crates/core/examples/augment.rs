//! Builds a ground-truth database from a handful of synthetic scenes and
//! runs the training-time augmentation on one of them.
//!
//! cargo run --example augment -- [seed]

use pointfuse::dataset::build_gt_database;
use pointfuse::preprocess::{augment_scene, AugmentParams};
use pointfuse::rng;
use pointfuse::synthetic::{generate_scenes, SceneConfig};

fn main() -> pointfuse::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scenes = generate_scenes(&SceneConfig::default(), 6, &mut rng::derived(seed, "scenes"))?;
    let db = build_gt_database(scenes.iter().map(|(c, a)| (c, a)));
    println!("database: {} objects", db.len());

    let (cloud, ann) = &scenes[0];
    let params = AugmentParams {
        samples_per_class: 4,
        ..AugmentParams::default()
    };
    let (aug_cloud, aug_ann) = augment_scene(cloud, ann, Some(&db), &params, &mut rng::derived(seed, "augment"));
    println!("before: {} points, {} objects", cloud.len(), ann.objects.len());
    println!("after:  {} points, {} objects", aug_cloud.len(), aug_ann.objects.len());
    for o in &aug_ann.objects {
        let b = &o.bbox;
        println!("  {:?} at ({:6.2}, {:6.2}) yaw {:+.2}", o.class, b.x, b.y, b.yaw);
    }
    Ok(())
}
