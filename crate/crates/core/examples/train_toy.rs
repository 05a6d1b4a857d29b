//! Overfits the toy-width detector on eight synthetic scenes and reports
//! how well each planted box is recovered.
//!
//! cargo run --example train_toy -- [steps] [seed]

use std::time::Instant;

use pointfuse::config::RunConfig;
use pointfuse::geometry::bev_iou;
use pointfuse::model::Detector;
use pointfuse::rng;
use pointfuse::synthetic::generate_scenes;
use pointfuse::tensor::{Adam, ParamStore};
use pointfuse::train::Trainer;

fn main() -> pointfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut cfg = RunConfig::toy();
    if let Some(seed) = args.next().and_then(|s| s.parse().ok()) {
        cfg.seed = seed;
    }
    let frames = generate_scenes(&cfg.synthetic, cfg.data.synthetic_frames, &mut rng::derived(cfg.seed, "synthetic"))?;
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &mut rng::derived(cfg.seed, "init"), &cfg.model, &cfg.grid, &cfg.voxelizer)?;
    let adam = Adam::new(cfg.optimizer.adam(steps));
    let mut trainer = Trainer::new(&det, adam, &frames, None, cfg.train.batch_size, cfg.seed)?;
    let t0 = Instant::now();
    for _ in 0..steps {
        let l = trainer.step(&mut store)?;
        if l.step % 25 == 0 || l.step + 1 == steps {
            println!("{l}  ({:.1}s)", t0.elapsed().as_secs_f64());
        }
    }
    for (cloud, ann) in &frames {
        let s = det.prepare(cloud, &mut rng::frame_voxelizer(cfg.seed, &ann.frame_id));
        let dets = det.detect(&store, &s, &mut rng::derived(cfg.seed, &format!("detect/{}", ann.frame_id)))?;
        let best: Vec<f64> = ann
            .objects
            .iter()
            .map(|o| dets.iter().map(|d| bev_iou(&d.bbox, &o.bbox)).fold(0.0, f64::max))
            .collect();
        println!("{}: {} planted, {} detected, best IoUs {best:.3?}", ann.frame_id, ann.objects.len(), dets.len());
    }
    Ok(())
}
