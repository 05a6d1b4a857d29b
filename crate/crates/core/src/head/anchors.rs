use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledObject, ObjectClass};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, normalize_angle, Box3D, RangeSpec};

/// Rotations laid at every cell.
pub const ANCHOR_YAWS: [f64; 2] = [0.0, FRAC_PI_2];

/// Number of regression targets per anchor.
pub const BOX_CODE: usize = 7;

/// Index of the yaw residual within the box code.
pub const YAW_INDEX: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorClass {
    pub class: ObjectClass,
    /// `(w, l, h)` in meters.
    pub size: [f64; 3],
    /// Centre height.
    pub z: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl AnchorClass {
    pub fn car() -> Self {
        Self {
            class: ObjectClass::Car,
            size: [1.6, 3.9, 1.56],
            z: -1.0,
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }

    pub fn cyclist() -> Self {
        Self {
            class: ObjectClass::Cyclist,
            size: [0.6, 1.76, 1.73],
            z: -0.6,
            pos_iou: 0.5,
            neg_iou: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("anchor {}: sizes must be positive", self.class)));
        }
        if !(0.0 < self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "anchor {}: need 0 < neg_iou <= pos_iou <= 1",
                self.class
            )));
        }
        Ok(())
    }
}

/// Anchors over an `H × W` output map. Anchor `a` of `A = classes · 2`
/// belongs to class `a / 2` with yaw `ANCHOR_YAWS[a % 2]`; the flat index of
/// anchor `a` at `(row, col)` is `(a · H + row) · W + col`, matching the
/// channel-first head output.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub classes: Vec<AnchorClass>,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<Box3D>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.classes.len() * ANCHOR_YAWS.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Class index of a flat anchor index.
    pub fn class_of(&self, i: usize) -> usize {
        i / self.plane() / ANCHOR_YAWS.len()
    }
}

/// Lays class anchors at the centres of an `height × width` map covering
/// the planar part of `range`.
pub fn generate_anchors(range: &RangeSpec, height: usize, width: usize, classes: &[AnchorClass]) -> AnchorGrid {
    let e = range.extent();
    let (sx, sy) = (e[0] / width as f64, e[1] / height as f64);
    let mut boxes = Vec::with_capacity(classes.len() * 2 * height * width);
    for c in classes {
        for yaw in ANCHOR_YAWS {
            for row in 0..height {
                for col in 0..width {
                    boxes.push(Box3D {
                        x: range.x_min + (col as f64 + 0.5) * sx,
                        y: range.y_min + (row as f64 + 0.5) * sy,
                        z: c.z,
                        w: c.size[0],
                        l: c.size[1],
                        h: c.size[2],
                        yaw,
                    });
                }
            }
        }
    }
    AnchorGrid {
        classes: classes.to_vec(),
        height,
        width,
        boxes,
    }
}

/// Regression residuals of `gt` against `anchor`, plus the direction bit.
pub fn encode_box(anchor: &Box3D, gt: &Box3D) -> Result<([f64; BOX_CODE], bool)> {
    if [anchor.w, anchor.l, anchor.h, gt.w, gt.l, gt.h].iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid("encode_box: sizes must be positive".into()));
    }
    let d = anchor.w.hypot(anchor.l);
    Ok((
        [
            (gt.x - anchor.x) / d,
            (gt.y - anchor.y) / d,
            (gt.z - anchor.z) / d,
            (gt.w / anchor.w).ln(),
            (gt.l / anchor.l).ln(),
            (gt.h / anchor.h).ln(),
            gt.yaw - anchor.yaw,
        ],
        gt.yaw >= 0.0,
    ))
}

/// Inverse of [`encode_box`]. The decoded yaw is moved by π when its sign
/// disagrees with `dir_positive`.
pub fn decode_box(anchor: &Box3D, r: &[f64; BOX_CODE], dir_positive: bool) -> Box3D {
    let d = anchor.w.hypot(anchor.l);
    let mut yaw = normalize_angle(anchor.yaw + r[6]);
    if (yaw >= 0.0) != dir_positive {
        yaw = normalize_angle(yaw + PI);
    }
    Box3D {
        x: anchor.x + r[0] * d,
        y: anchor.y + r[1] * d,
        z: anchor.z + r[2] * d,
        w: anchor.w * r[3].exp(),
        l: anchor.l * r[4].exp(),
        h: anchor.h * r[5].exp(),
        yaw,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// BEV-IoU assignment. Each class's anchors are matched against that
/// class's targets only: positive at `IoU >= pos_iou` or as the best anchor
/// of some ground truth, negative when below `neg_iou` for all, otherwise
/// ignored. The returned index refers to `gts`.
pub fn match_anchors(anchors: &AnchorGrid, gts: &[LabeledObject]) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let per_class = anchors.plane() * ANCHOR_YAWS.len();
    for (ci, cls) in anchors.classes.iter().enumerate() {
        let own: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class == cls.class).collect();
        if own.is_empty() {
            continue;
        }
        let range = ci * per_class..(ci + 1) * per_class;
        let mut best_iou = vec![0.0f64; own.len()];
        let mut best_anchor = vec![None; own.len()];
        for i in range {
            let a = &anchors.boxes[i];
            let mut max = 0.0;
            let mut arg = None;
            for (k, &j) in own.iter().enumerate() {
                let iou = bev_iou(a, &gts[j].bbox);
                if iou > max {
                    max = iou;
                    arg = Some(j);
                }
                if iou > best_iou[k] {
                    best_iou[k] = iou;
                    best_anchor[k] = Some(i);
                }
            }
            labels[i] = match arg {
                Some(j) if max >= cls.pos_iou => AnchorLabel::Positive(j),
                _ if max < cls.neg_iou => AnchorLabel::Negative,
                _ => AnchorLabel::Ignore,
            };
        }
        for (k, &j) in own.iter().enumerate() {
            if let Some(i) = best_anchor[k] {
                labels[i] = AnchorLabel::Positive(j);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_anchor_count_and_first_centre() {
        let g = generate_anchors(&RangeSpec::KITTI, 152, 152, &[AnchorClass::car(), AnchorClass::cyclist()]);
        assert_eq!(g.len(), 92_416);
        let a = g.boxes[0];
        assert!((a.x - 0.2).abs() < 1e-12 && (a.y + 30.2).abs() < 1e-12);
        assert_eq!(g.boxes[152 * 152].yaw, FRAC_PI_2);
        assert_eq!(g.class_of(2 * 152 * 152), 1);
    }

    #[test]
    fn hand_residuals() {
        let a = Box3D::new([0.0, 0.0, -1.0], [1.6, 3.9, 1.56], 0.0).unwrap();
        let g = Box3D::new([1.0, 0.0, -1.0], [3.2, 3.9, 1.56], 0.0).unwrap();
        let (r, dir) = encode_box(&a, &g).unwrap();
        assert!((r[0] - 0.23722).abs() < 1e-5);
        assert!((r[3] - 2f64.ln()).abs() < 1e-15);
        assert!(dir);
        let back = decode_box(&a, &r, dir);
        assert!((back.x - 1.0).abs() < 1e-12 && (back.w - 3.2).abs() < 1e-12);
        assert_eq!(decode_box(&a, &[0.0; 7], true), a);
    }

    #[test]
    fn no_targets_means_all_negative() {
        let g = generate_anchors(&RangeSpec::KITTI, 4, 4, &[AnchorClass::car()]);
        assert!(match_anchors(&g, &[]).iter().all(|l| *l == AnchorLabel::Negative));
    }
}
