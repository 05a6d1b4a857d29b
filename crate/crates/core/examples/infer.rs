//! Runs a checkpoint over synthetic frames and prints the detections next
//! to the planted boxes. Without a checkpoint a briefly trained toy model
//! is used.
//!
//! cargo run --example infer -- [checkpoint] [config.toml]

use std::path::PathBuf;

use pointfuse::commands;
use pointfuse::config::RunConfig;
use pointfuse::geometry::bev_iou;

fn main() -> pointfuse::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().map(PathBuf::from);
    let cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::toy(),
    };
    let scratch = tempfile::tempdir().expect("temporary directory");
    let ckpt = match ckpt {
        Some(c) => c,
        None => {
            let mut quick = cfg.clone();
            quick.train.max_steps = Some(60);
            println!("training 60 steps for a demo checkpoint");
            commands::train(&quick, scratch.path())?.checkpoints.pop().expect("final checkpoint")
        }
    };
    let (det, store) = commands::load_detector(&cfg, &ckpt)?;
    let ids = commands::split_ids(&cfg, &cfg.data.val_split)?;
    let frames = commands::load_frames(&cfg, &ids[..ids.len().min(3)])?;
    for (f, dets) in frames.iter().zip(commands::detect_frames(&cfg, &det, &store, &frames)?) {
        println!("{}: {} planted, {} detected", f.id, f.annotation.objects.len(), dets.len());
        for d in &dets {
            let best = f.annotation.objects.iter().map(|o| bev_iou(&o.bbox, &d.bbox)).fold(0.0, f64::max);
            println!("  {:?} {:.3} at ({:6.2}, {:6.2}) best IoU {best:.3}", d.class, d.score, d.bbox.x, d.bbox.y);
        }
    }
    Ok(())
}
