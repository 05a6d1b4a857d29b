//! Scores perturbed copies of synthetic ground truth with the 40-point
//! interpolated AP and prints the report.
//!
//! cargo run --example eval_ap -- [noise_m]

use pointfuse::dataset::Detection;
use pointfuse::eval::{evaluate, EvalConfig};
use pointfuse::geometry::Box3D;
use pointfuse::rng::{self, uniform};
use pointfuse::synthetic::{generate_scenes, SceneConfig};
use rand::Rng;

fn main() -> pointfuse::Result<()> {
    let noise: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let scenes = generate_scenes(&SceneConfig::default(), 20, &mut rng::seeded(5))?;
    let mut r = rng::seeded(6);
    let mut dets = Vec::new();
    for (_, ann) in &scenes {
        let mut frame = Vec::new();
        for o in &ann.objects {
            // Some objects are missed entirely.
            if r.gen::<f64>() < 0.1 {
                continue;
            }
            let b = o.bbox;
            let moved = Box3D::new(
                [b.x + uniform(&mut r, -noise, noise), b.y + uniform(&mut r, -noise, noise), b.z],
                [b.w, b.l, b.h],
                b.yaw + uniform(&mut r, -0.1, 0.1),
            )?;
            frame.push(Detection { class: o.class.clone(), bbox: moved, score: r.gen() });
        }
        // One false positive per frame.
        let fp = Box3D::new([uniform(&mut r, 5.0, 60.0), uniform(&mut r, -30.0, 30.0), -1.0], [1.6, 3.9, 1.5], 0.0)?;
        frame.push(Detection { class: pointfuse::dataset::ObjectClass::Car, bbox: fp, score: r.gen::<f64>() * 0.5 });
        dets.push(frame);
    }
    let gts: Vec<_> = scenes.into_iter().map(|(_, a)| a).collect();
    let report = evaluate(&dets, &gts, &EvalConfig::default())?;
    print!("{report}");
    Ok(())
}
