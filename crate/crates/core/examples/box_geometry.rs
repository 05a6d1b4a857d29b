//! Rotated-box overlap and greedy BEV non-maximum suppression.
//!
//! cargo run --example box_geometry

use std::f64::consts::FRAC_PI_4;

use pointfuse::geometry::{bev_iou, iou_3d, nms_bev, Box3D};

fn main() -> pointfuse::Result<()> {
    let a = Box3D::new([10.0, 0.0, -1.0], [1.6, 3.9, 1.5], 0.0)?;
    for (dx, yaw) in [(0.0, 0.0), (0.5, 0.0), (0.0, FRAC_PI_4), (1.0, 0.3), (3.0, 0.0)] {
        let b = Box3D::new([10.0 + dx, 0.0, -0.8], [1.6, 3.9, 1.5], yaw)?;
        println!("dx {dx:.1} yaw {yaw:.2}: bev {:.4}  3d {:.4}", bev_iou(&a, &b), iou_3d(&a, &b));
    }

    let boxes: Vec<Box3D> = [(10.0, 0.0), (10.3, 0.1), (10.1, -0.2), (14.0, 0.0), (14.2, 0.3)]
        .iter()
        .map(|&(x, y)| Box3D::new([x, y, -1.0], [1.6, 3.9, 1.5], 0.1))
        .collect::<pointfuse::Result<_>>()?;
    let scores = [0.7, 0.9, 0.6, 0.5, 0.8];
    let keep = nms_bev(&boxes, &scores, 0.5)?;
    println!("kept {keep:?}");
    Ok(())
}
