//! Ground-truth sample database used by paste augmentation.
//!
//! On disk: `index.txt` with one entry per line
//! `class frame x y z w l h yaw offset count flag` and `points.bin` holding
//! every entry's points back to back as `f64` little-endian `(x, y, z, r)`.
//! `offset` and `count` are in points; `flag` is `ok` or `empty`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{FrameAnnotation, ObjectClass, Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const GT_INDEX_FILE: &str = "index.txt";
pub const GT_POINTS_FILE: &str = "points.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct GtEntry {
    pub class: ObjectClass,
    pub frame_id: String,
    pub bbox: Box3D,
    pub points: Vec<Point>,
}

impl GtEntry {
    /// Entries without points are kept but never pasted.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtDatabase {
    pub entries: Vec<GtEntry>,
}

/// Crops every target box of every frame. Entry order follows frame order,
/// then annotation order.
pub fn build_gt_database<'a, I>(frames: I) -> GtDatabase
where
    I: IntoIterator<Item = (&'a PointCloud, &'a FrameAnnotation)>,
{
    let mut entries = Vec::new();
    for (cloud, ann) in frames {
        for obj in ann.targets() {
            let points: Vec<Point> = cloud.iter().filter(|p| obj.bbox.contains(p)).copied().collect();
            if points.is_empty() {
                log::debug!("{}: {} box has no points, flagged empty", ann.frame_id, obj.class);
            }
            entries.push(GtEntry {
                class: obj.class.clone(),
                frame_id: ann.frame_id.clone(),
                bbox: obj.bbox,
                points,
            });
        }
    }
    GtDatabase { entries }
}

impl GtDatabase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Non-empty entries of one class.
    pub fn usable(&self, class: &ObjectClass) -> Vec<&GtEntry> {
        self.entries
            .iter()
            .filter(|e| &e.class == class && !e.is_empty())
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        let mut blob = Vec::new();
        let mut offset = 0usize;
        for e in &self.entries {
            let b = &e.bbox;
            let flag = if e.is_empty() { "empty" } else { "ok" };
            let _ = writeln!(
                index,
                "{} {} {} {} {} {} {} {} {} {} {} {}",
                e.class,
                e.frame_id,
                b.x,
                b.y,
                b.z,
                b.w,
                b.l,
                b.h,
                b.yaw,
                offset,
                e.points.len(),
                flag
            );
            for p in &e.points {
                for v in [p.x, p.y, p.z, p.r] {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            offset += e.points.len();
        }
        let ip = dir.join(GT_INDEX_FILE);
        fs::write(&ip, index).map_err(|e| Error::io(&ip, e))?;
        let bp = dir.join(GT_POINTS_FILE);
        fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ip = dir.join(GT_INDEX_FILE);
        let bp = dir.join(GT_POINTS_FILE);
        let index = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: ip.clone(),
            line,
            msg,
        };
        let mut entries = Vec::new();
        for (i, line) in index.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 12 {
                return Err(perr(i + 1, format!("expected 12 fields, got {}", t.len())));
            }
            let f = |k: usize| t[k].parse::<f64>().map_err(|e| perr(i + 1, format!("field {k}: {e}")));
            let u = |k: usize| t[k].parse::<usize>().map_err(|e| perr(i + 1, format!("field {k}: {e}")));
            let bbox = Box3D::new([f(2)?, f(3)?, f(4)?], [f(5)?, f(6)?, f(7)?], f(8)?)
                .map_err(|e| perr(i + 1, e.to_string()))?;
            let (offset, count) = (u(9)?, u(10)?);
            let end = (offset + count) * 32;
            if end > blob.len() {
                return Err(Error::Format {
                    path: bp.clone(),
                    offset: blob.len() as u64,
                    msg: format!("entry on index line {} needs bytes up to {end}", i + 1),
                });
            }
            let points = blob[offset * 32..end]
                .chunks_exact(32)
                .map(|c| {
                    let v = |j: usize| f64::from_le_bytes(c[8 * j..8 * j + 8].try_into().expect("8 bytes"));
                    Point::new(v(0), v(1), v(2), v(3))
                })
                .collect::<Vec<_>>();
            let flag_empty = match t[11] {
                "ok" => false,
                "empty" => true,
                other => return Err(perr(i + 1, format!("unknown flag {other:?}"))),
            };
            if flag_empty != points.is_empty() {
                return Err(perr(i + 1, "flag disagrees with point count".into()));
            }
            entries.push(GtEntry {
                class: t[0].parse().expect("infallible"),
                frame_id: t[1].to_string(),
                bbox,
                points,
            });
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledObject;

    fn obj(class: ObjectClass, x: f64) -> LabeledObject {
        LabeledObject {
            class,
            bbox: Box3D::new([x, 0.0, 0.0], [2.0, 4.0, 2.0], 0.3).unwrap(),
            occlusion: 0,
            truncation: 0.0,
            bbox_height: 50.0,
        }
    }

    #[test]
    fn empty_annotation_contributes_nothing() {
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.1)]);
        let ann = FrameAnnotation::default();
        assert!(build_gt_database([(&cloud, &ann)]).is_empty());
    }

    #[test]
    fn ignorable_objects_are_skipped_and_empty_boxes_flagged() {
        let cloud = PointCloud::new(vec![Point::new(0.1, 0.2, 0.0, 0.5), Point::new(20.0, 0.0, 0.0, 0.5)]);
        let ann = FrameAnnotation {
            frame_id: "7".into(),
            objects: vec![
                obj(ObjectClass::Car, 0.0),
                obj(ObjectClass::Other("DontCare".into()), 20.0),
                obj(ObjectClass::Cyclist, 10.0),
            ],
        };
        let db = build_gt_database([(&cloud, &ann)]);
        assert_eq!(db.len(), 2);
        assert_eq!(db.entries[0].points.len(), 1);
        assert!(db.entries[1].is_empty());
        assert!(db.usable(&ObjectClass::Cyclist).is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new((0..40).map(|i| Point::new(0.05 * i as f64 - 1.0, 0.1, 0.2, 0.3)).collect());
        let ann = FrameAnnotation {
            frame_id: "000001".into(),
            objects: vec![obj(ObjectClass::Car, 0.0), obj(ObjectClass::Cyclist, 30.0)],
        };
        let db = build_gt_database([(&cloud, &ann)]);
        db.save(dir.path()).unwrap();
        let back = GtDatabase::load(dir.path()).unwrap();
        assert_eq!(back, db);
    }
}
