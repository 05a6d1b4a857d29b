//! Writes a two-frame dataset in the KITTI `training/` layout, reads it
//! back and prints the parsed labels and a result file.
//!
//! cargo run --example kitti_io

use pointfuse::dataset::{read_kitti_results, write_kitti_results, Calibration, Detection, KittiDataset};
use pointfuse::rng;
use pointfuse::synthetic::{generate_scenes, SceneConfig};

fn main() -> pointfuse::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let ds = KittiDataset::new(dir.path());
    let calib = Calibration::kitti_nominal();
    let scenes = generate_scenes(&SceneConfig::default(), 2, &mut rng::seeded(3))?;
    let ids: Vec<String> = scenes.iter().map(|(_, a)| a.frame_id.clone()).collect();
    for (cloud, ann) in &scenes {
        ds.write_frame(&ann.frame_id, cloud, ann, &calib)?;
    }
    ds.write_split("train", &ids)?;

    for id in ds.split("train")? {
        let (cloud, ann, calib) = ds.load_frame(&id)?;
        println!("{id}: {} points", cloud.len());
        print!("{}", std::fs::read_to_string(ds.label_path(&id)).unwrap_or_default());
        for o in &ann.objects {
            println!("  lidar frame: {:?} centre ({:.2}, {:.2}, {:.2})", o.class, o.bbox.x, o.bbox.y, o.bbox.z);
        }

        let dets: Vec<Detection> = ann
            .objects
            .iter()
            .map(|o| Detection { class: o.class.clone(), bbox: o.bbox, score: 0.9 })
            .collect();
        let p = dir.path().join(format!("{id}.txt"));
        write_kitti_results(&p, &dets, &calib)?;
        println!("  results round trip: {} detections", read_kitti_results(&p, &calib)?.len());
    }
    Ok(())
}
