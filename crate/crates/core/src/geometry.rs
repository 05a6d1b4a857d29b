//! Oriented boxes in the LiDAR frame and their bird's-eye-view geometry.
//!
//! A box's width `w` runs along its local x axis and its length `l` along
//! its local y axis; `yaw` rotates the local frame counter-clockwise about
//! the vertical axis. `z` is the box centre.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::error::{Error, Result};

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if r >= PI {
        r -= 2.0 * PI;
    }
    if r < -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let [x, y, z] = center;
        let [w, l, h] = size;
        let finite = center.iter().chain(&size).all(|v| v.is_finite()) && yaw.is_finite();
        if !finite || w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(Error::Invalid(format!(
                "box needs finite values and positive size, got center {center:?} size {size:?} yaw {yaw}"
            )));
        }
        Ok(Self {
            x,
            y,
            z,
            w,
            l,
            h,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// Half of the BEV diagonal.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    /// Rotates world offsets into the box frame.
    pub fn to_local(&self, dx: f64, dy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, p: &Point) -> bool {
        let (lx, ly) = self.to_local(p.x - self.x, p.y - self.y);
        lx.abs() <= 0.5 * self.w && ly.abs() <= 0.5 * self.l && (p.z - self.z).abs() <= 0.5 * self.h
    }
}

/// Axis-aligned metric bounds `[min, max]` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl RangeSpec {
    /// Forward 60.8 m, ±30.4 m lateral, -3 m to 1 m vertical.
    pub const KITTI: RangeSpec = RangeSpec {
        x_min: 0.0,
        x_max: 60.8,
        y_min: -30.4,
        y_max: 30.4,
        z_min: -3.0,
        z_max: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("x", self.x_min, self.x_max),
            ("y", self.y_min, self.y_max),
            ("z", self.z_min, self.z_max),
        ];
        for (name, lo, hi) in axes {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("range {name}: need min < max, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x)
            && (self.y_min..=self.y_max).contains(&y)
            && (self.z_min..=self.z_max).contains(&z)
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.x_max - self.x_min, self.y_max - self.y_min, self.z_max - self.z_min]
    }
}

/// BEV corners in counter-clockwise order.
pub fn box_corners_bev(b: &Box3D) -> [[f64; 2]; 4] {
    let (hw, hl) = (0.5 * b.w, 0.5 * b.l);
    let (s, c) = b.yaw.sin_cos();
    [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]].map(|[u, v]| [b.x + c * u - s * v, b.y + s * u + c * v])
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

// Points within this signed distance (metres) outside a clip edge count as
// on it; keeps self-intersection exact.
const CLIP_TOLERANCE: f64 = 1e-9;

/// Sutherland–Hodgman clip of `subject` against the convex CCW `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (c0, c1) = (clip[i], clip[(i + 1) % clip.len()]);
        let (ex, ey) = (c1[0] - c0[0], c1[1] - c0[1]);
        let len = ex.hypot(ey);
        if len == 0.0 {
            continue;
        }
        let side = |p: [f64; 2]| (ex * (p[1] - c0[1]) - ey * (p[0] - c0[0])) / len;
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            let (p_in, q_in) = (sp >= -CLIP_TOLERANCE, sq >= -CLIP_TOLERANCE);
            let cross = || {
                let t = (sp / (sp - sq)).clamp(0.0, 1.0);
                [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
            };
            if q_in {
                if !p_in {
                    out.push(cross());
                }
                out.push(q);
            } else if p_in {
                out.push(cross());
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let d = (a.x - b.x).hypot(a.y - b.y);
    if d > a.bev_radius() + b.bev_radius() {
        return 0.0;
    }
    polygon_area(&clip_convex(&box_corners_bev(a), &box_corners_bev(b)))
}

/// Rotated IoU in the ground plane; `z` and `h` are ignored.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Volumetric IoU: BEV intersection times vertical overlap over union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let top = (a.z + 0.5 * a.h).min(b.z + 0.5 * b.h);
    let bottom = (a.z - 0.5 * a.h).max(b.z - 0.5 * b.h);
    let dz = top - bottom;
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy BEV non-maximum suppression. Returns kept indices in descending
/// score order; equal scores keep the lower index first.
pub fn nms_bev(boxes: &[Box3D], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Invalid(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Invalid(format!("nms: threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && bev_iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Membership mask; points on the box surface count as inside.
pub fn points_in_box(points: &[Point], b: &Box3D) -> Vec<bool> {
    points.iter().map(|p| b.contains(p)).collect()
}
