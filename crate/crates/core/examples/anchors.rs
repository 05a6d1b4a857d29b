//! Lays anchors over a small output map, assigns them to two cars and shows
//! the regression code of one positive.
//!
//! cargo run --example anchors

use pointfuse::dataset::{LabeledObject, ObjectClass};
use pointfuse::geometry::Box3D;
use pointfuse::head::{decode_box, encode_box, generate_anchors, match_anchors, AnchorClass, AnchorLabel};
use pointfuse::presets::TOY_RANGE;

fn main() -> pointfuse::Result<()> {
    let grid = generate_anchors(&TOY_RANGE, 16, 16, &[AnchorClass::car()]);
    println!("{} anchors, {} per cell", grid.len(), grid.per_cell());

    let car = |x, y, yaw| -> pointfuse::Result<LabeledObject> {
        Ok(LabeledObject {
            class: ObjectClass::Car,
            bbox: Box3D::new([x, y, -1.0], [1.7, 4.1, 1.5], yaw)?,
            occlusion: 0,
            truncation: 0.0,
            bbox_height: 40.0,
        })
    };
    let gts = vec![car(8.0, 2.5, 0.1)?, car(18.0, -4.0, 1.4)?];
    let labels = match_anchors(&grid, &gts);
    let count = |f: fn(&AnchorLabel) -> bool| labels.iter().filter(|l| f(l)).count();
    println!(
        "positive {}, ignored {}, negative {}",
        count(|l| matches!(l, AnchorLabel::Positive(_))),
        count(|l| matches!(l, AnchorLabel::Ignore)),
        count(|l| matches!(l, AnchorLabel::Negative))
    );

    let (i, j) = labels
        .iter()
        .enumerate()
        .find_map(|(i, l)| match l {
            AnchorLabel::Positive(j) => Some((i, *j)),
            _ => None,
        })
        .expect("every target gets an anchor");
    let (code, dir) = encode_box(&grid.boxes[i], &gts[j].bbox)?;
    println!("anchor {i} -> target {j}: code {code:.4?}, direction bin {dir}");
    let back = decode_box(&grid.boxes[i], &code, dir);
    println!("decoded ({:.3}, {:.3}) yaw {:.3}", back.x, back.y, back.yaw);
    Ok(())
}
