//! Frame-level data: point clouds, annotations, and their on-disk formats.

mod gtdb;
mod kitti;
mod velodyne;

pub use gtdb::{build_gt_database, GtDatabase, GtEntry, GT_INDEX_FILE, GT_POINTS_FILE};
pub use kitti::{
    parse_kitti_labels, read_kitti_labels, read_kitti_results, read_split, write_kitti_results, Calibration,
    KittiDataset,
};
pub use velodyne::{decode_velodyne, encode_velodyne, read_velodyne_bin, write_velodyne_bin, VelodyneScan};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::Box3D;

/// One LiDAR return; `r` is reflectance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.r.is_finite()
    }

    pub fn dist(&self, o: &Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2) + (self.z - o.z).powi(2)).sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ObjectClass {
    Car,
    Cyclist,
    Other(String),
}

impl ObjectClass {
    pub const TARGETS: [ObjectClass; 2] = [ObjectClass::Car, ObjectClass::Cyclist];

    pub fn as_str(&self) -> &str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::Other(s) => s,
        }
    }

    /// Car and Cyclist are detected; everything else (including
    /// `DontCare`) is kept only as an ignore region.
    pub fn is_target(&self) -> bool {
        matches!(self, ObjectClass::Car | ObjectClass::Cyclist)
    }
}

impl FromStr for ObjectClass {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Car" => ObjectClass::Car,
            "Cyclist" => ObjectClass::Cyclist,
            other => ObjectClass::Other(other.to_string()),
        })
    }
}

impl From<String> for ObjectClass {
    fn from(s: String) -> Self {
        match s.parse() {
            Ok(c) => c,
            Err(e) => match e {},
        }
    }
}

impl From<ObjectClass> for String {
    fn from(c: ObjectClass) -> Self {
        c.as_str().to_string()
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated object in the LiDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledObject {
    pub class: ObjectClass,
    pub bbox: Box3D,
    /// 0 fully visible … 3 unknown.
    pub occlusion: u8,
    pub truncation: f64,
    /// Height of the 2D image box in pixels.
    pub bbox_height: f64,
}

impl LabeledObject {
    pub fn is_ignorable(&self) -> bool {
        !self.class.is_target()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub objects: Vec<LabeledObject>,
}

impl FrameAnnotation {
    pub fn targets(&self) -> impl Iterator<Item = &LabeledObject> {
        self.objects.iter().filter(|o| !o.is_ignorable())
    }
}

/// A decoded detection in the LiDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: ObjectClass,
    pub bbox: Box3D,
    pub score: f64,
}
