//! Procedural scenes: a noisy ground plane plus box-shaped objects sampled
//! on their surfaces.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameAnnotation, LabeledObject, Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D, RangeSpec};
use crate::head::AnchorClass;
use crate::rng::uniform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub range: RangeSpec,
    /// Templates for object size and centre height.
    pub classes: Vec<AnchorClass>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_object: usize,
    pub ground_points: usize,
    /// Relative size jitter applied to each template dimension.
    pub size_jitter: f64,
    /// Distance kept between object centres and the range border.
    pub margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: RangeSpec::KITTI,
            classes: vec![AnchorClass::car()],
            min_objects: 1,
            max_objects: 3,
            points_per_object: 300,
            ground_points: 2000,
            size_jitter: 0.05,
            margin: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.classes.is_empty() || self.min_objects > self.max_objects {
            return Err(Error::Config("scene needs classes and min_objects <= max_objects".into()));
        }
        let e = self.range.extent();
        if 2.0 * self.margin >= e[0].min(e[1]) {
            return Err(Error::Config("scene margin leaves no room for objects".into()));
        }
        if !(0.0..0.5).contains(&self.size_jitter) {
            return Err(Error::Config("size_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

fn ground_z(classes: &[AnchorClass]) -> f64 {
    classes
        .iter()
        .map(|c| c.z - c.size[2] / 2.0)
        .fold(f64::INFINITY, f64::min)
}

/// Points on the side and top faces, pulled slightly inwards so that every
/// point lies strictly inside its box.
fn surface_points(b: &Box3D, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    let (hw, hl, hh) = (0.49 * b.w, 0.49 * b.l, 0.49 * b.h);
    let faces = [b.l * b.h, b.l * b.h, b.w * b.h, b.w * b.h, b.w * b.l];
    let total: f64 = faces.iter().sum();
    let (s, c) = b.yaw.sin_cos();
    (0..n)
        .map(|_| {
            let mut pick = uniform(rng, 0.0, total);
            let mut face = 0;
            while face < 4 && pick > faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let u = uniform(rng, -1.0, 1.0);
            let v = uniform(rng, -1.0, 1.0);
            let (lx, ly, lz) = match face {
                0 => (hw, u * hl, v * hh),
                1 => (-hw, u * hl, v * hh),
                2 => (u * hw, hl, v * hh),
                3 => (u * hw, -hl, v * hh),
                _ => (u * hw, v * hl, hh),
            };
            let r = uniform(rng, 0.3, 0.9);
            Point::new(b.x + c * lx - s * ly, b.y + s * lx + c * ly, b.z + lz, r)
        })
        .collect()
}

/// One scene with non-overlapping objects. Object count, classes, poses
/// and points all come from `rng`.
pub fn generate_scene(cfg: &SceneConfig, frame_id: &str, rng: &mut impl Rng) -> Result<(PointCloud, FrameAnnotation)> {
    cfg.validate()?;
    let r = &cfg.range;
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<LabeledObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Invalid(format!("could not place {count} objects without overlap")));
        }
        let t = &cfg.classes[rng.gen_range(0..cfg.classes.len())];
        let j = |rng: &mut _, s: f64| s * (1.0 + uniform(rng, -cfg.size_jitter, cfg.size_jitter));
        let size = [j(rng, t.size[0]), j(rng, t.size[1]), j(rng, t.size[2])];
        let x = uniform(rng, r.x_min + cfg.margin, r.x_max - cfg.margin);
        let y = uniform(rng, r.y_min + cfg.margin, r.y_max - cfg.margin);
        let yaw = uniform(rng, -PI, PI);
        let bbox = Box3D::new([x, y, t.z], size, yaw)?;
        if objects.iter().any(|o| bev_iou(&o.bbox, &bbox) > 0.0) {
            continue;
        }
        objects.push(LabeledObject {
            class: t.class.clone(),
            bbox,
            occlusion: 0,
            truncation: 0.0,
            bbox_height: 100.0,
        });
    }
    let gz = ground_z(&cfg.classes);
    let mut points: Vec<Point> = (0..cfg.ground_points)
        .map(|_| {
            Point::new(
                uniform(rng, r.x_min, r.x_max),
                uniform(rng, r.y_min, r.y_max),
                gz + uniform(rng, -0.03, 0.03),
                uniform(rng, 0.0, 0.2),
            )
        })
        .filter(|p| {
            !objects.iter().any(|o| {
                let (lx, ly) = o.bbox.to_local(p.x - o.bbox.x, p.y - o.bbox.y);
                lx.abs() <= 0.5 * o.bbox.w && ly.abs() <= 0.5 * o.bbox.l
            })
        })
        .collect();
    for o in &objects {
        points.extend(surface_points(&o.bbox, cfg.points_per_object, rng));
    }
    let ann = FrameAnnotation {
        frame_id: frame_id.to_string(),
        objects,
    };
    Ok((PointCloud::new(points), ann))
}

/// `n` scenes named `000000`, `000001`, … from one generator.
pub fn generate_scenes(cfg: &SceneConfig, n: usize, rng: &mut impl Rng) -> Result<Vec<(PointCloud, FrameAnnotation)>> {
    (0..n).map(|i| generate_scene(cfg, &format!("{i:06}"), rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;
    use crate::rng;

    #[test]
    fn object_points_fall_inside_their_boxes() {
        let cfg = SceneConfig::default();
        let (cloud, ann) = generate_scene(&cfg, "x", &mut rng::seeded(3)).unwrap();
        assert!((1..=3).contains(&ann.objects.len()));
        for o in &ann.objects {
            let inside = points_in_box(&cloud.points, &o.bbox).iter().filter(|&&m| m).count();
            assert_eq!(inside, cfg.points_per_object);
        }
        assert!(cloud.iter().all(|p| cfg.range.contains(p.x, p.y, p.z)));
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = generate_scenes(&cfg, 3, &mut rng::seeded(9)).unwrap();
        let b = generate_scenes(&cfg, 3, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }
}
