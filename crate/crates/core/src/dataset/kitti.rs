//! KITTI text formats: calibration, `label_2` rows, result files and splits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use super::{Detection, FrameAnnotation, LabeledObject, ObjectClass, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::Box3D;

/// Rectification and LiDAR-to-camera transforms of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub r0_rect: Matrix3<f64>,
    pub velo_rot: Matrix3<f64>,
    pub velo_trans: Vector3<f64>,
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            r0_rect: Matrix3::identity(),
            velo_rot: Matrix3::identity(),
            velo_trans: Vector3::zeros(),
        }
    }

    /// Nominal KITTI mounting: camera z forward is LiDAR x, camera x right is
    /// LiDAR −y, camera y down is LiDAR −z.
    pub fn kitti_nominal() -> Self {
        Self {
            r0_rect: Matrix3::identity(),
            velo_rot: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            velo_trans: Vector3::zeros(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut r0 = None;
        let mut tr = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let want = match key.trim() {
                "R0_rect" | "R_rect" => 9,
                "Tr_velo_to_cam" | "Tr_velo_cam" => 12,
                _ => continue,
            };
            let vals = rest
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(path, i + 1, format!("{}: {e}", key.trim())))?;
            if vals.len() != want {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("{} needs {want} values, got {}", key.trim(), vals.len()),
                ));
            }
            if want == 9 {
                r0 = Some(Matrix3::from_row_slice(&vals));
            } else {
                let rot = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
                tr = Some((rot, Vector3::new(vals[3], vals[7], vals[11])));
            }
        }
        let (velo_rot, velo_trans) = tr.ok_or_else(|| parse_err(path, 0, "missing Tr_velo_to_cam".into()))?;
        let r0_rect = r0.ok_or_else(|| parse_err(path, 0, "missing R0_rect".into()))?;
        for m in [&r0_rect, &velo_rot] {
            if m.try_inverse().is_none() {
                return Err(parse_err(path, 0, "singular rotation block".into()));
            }
        }
        Ok(Self {
            r0_rect,
            velo_rot,
            velo_trans,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Calibration text carrying only the two blocks this crate reads.
    pub fn to_kitti_string(&self) -> String {
        let mut s = String::from("R0_rect:");
        for v in self.r0_rect.transpose().iter() {
            let _ = write!(s, " {v}");
        }
        s.push_str("\nTr_velo_to_cam:");
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(s, " {}", self.velo_rot[(r, c)]);
            }
            let _ = write!(s, " {}", self.velo_trans[r]);
        }
        s.push('\n');
        s
    }

    /// Linear part of the rectified-camera to LiDAR map.
    fn cam_to_lidar_rot(&self) -> Matrix3<f64> {
        let r0_inv = self.r0_rect.try_inverse().expect("validated at parse");
        let rot_inv = self.velo_rot.try_inverse().expect("validated at parse");
        rot_inv * r0_inv
    }

    /// Rectified camera coordinates to LiDAR coordinates.
    pub fn cam_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let r0_inv = self.r0_rect.try_inverse().expect("validated at parse");
        let rot_inv = self.velo_rot.try_inverse().expect("validated at parse");
        let v = rot_inv * (r0_inv * Vector3::from(p) - self.velo_trans);
        [v.x, v.y, v.z]
    }

    pub fn lidar_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.r0_rect * (self.velo_rot * Vector3::from(p) + self.velo_trans);
        [v.x, v.y, v.z]
    }

    /// Camera-frame `rotation_y` to LiDAR yaw, by mapping the box's length
    /// direction `(cos ry, 0, -sin ry)` through the calibration.
    pub fn ry_to_yaw(&self, ry: f64) -> f64 {
        let d = self.cam_to_lidar_rot() * Vector3::new(ry.cos(), 0.0, -ry.sin());
        d.y.atan2(d.x) - std::f64::consts::FRAC_PI_2
    }

    pub fn yaw_to_ry(&self, yaw: f64) -> f64 {
        let phi = yaw + std::f64::consts::FRAC_PI_2;
        let inv = self.cam_to_lidar_rot().try_inverse().expect("validated at parse");
        let d = inv * Vector3::new(phi.cos(), phi.sin(), 0.0);
        (-d.z).atan2(d.x)
    }

    /// LiDAR box from camera-frame KITTI dimensions, bottom-centre location
    /// and `rotation_y`.
    pub fn box_from_camera(&self, hwl: [f64; 3], loc: [f64; 3], ry: f64) -> Result<Box3D> {
        let [h, w, l] = hwl;
        let c = self.cam_to_lidar([loc[0], loc[1] - 0.5 * h, loc[2]]);
        Box3D::new(c, [w, l, h], self.ry_to_yaw(ry))
    }

    /// Inverse of [`Calibration::box_from_camera`]: `(hwl, loc, ry)`.
    pub fn box_to_camera(&self, b: &Box3D) -> ([f64; 3], [f64; 3], f64) {
        let c = self.lidar_to_cam(b.center());
        ([b.h, b.w, b.l], [c[0], c[1] + 0.5 * b.h, c[2]], self.yaw_to_ry(b.yaw))
    }
}

fn parse_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

fn fields<'a>(line: &'a str, path: &Path, lineno: usize, min: usize) -> Result<(ObjectClass, Vec<f64>)> {
    let mut it = line.split_whitespace();
    let class: ObjectClass = it.next().expect("non-empty line").parse().expect("infallible");
    let vals = it
        .map(|t: &'a str| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_err(path, lineno, e.to_string()))?;
    if vals.len() < min {
        return Err(parse_err(
            path,
            lineno,
            format!("expected at least {} fields, got {}", min + 1, vals.len() + 1),
        ));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, lineno, "non-finite field".into()));
    }
    Ok((class, vals))
}

/// Parses `label_2` text. `path` is only used in error messages.
pub fn parse_kitti_labels(text: &str, frame_id: &str, calib: &Calibration, path: &Path) -> Result<FrameAnnotation> {
    let mut objects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (class, v) = fields(line, path, i + 1, 14)?;
        // DontCare rows carry -1, read as "unknown".
        let occ = if v[1] == -1.0 { 3.0 } else { v[1] };
        if !(0.0..=3.0).contains(&occ) || occ.fract() != 0.0 {
            return Err(parse_err(path, i + 1, format!("bad occlusion level {occ}")));
        }
        let bbox = match class {
            // DontCare rows use -1 sizes and -1000 locations.
            ObjectClass::Other(_) if v[7] <= 0.0 || v[8] <= 0.0 || v[9] <= 0.0 => {
                let c = calib.cam_to_lidar([v[10], v[11], v[12]]);
                Box3D::new(c, [1e-3, 1e-3, 1e-3], 0.0)
            }
            _ => calib.box_from_camera([v[7], v[8], v[9]], [v[10], v[11], v[12]], v[13]),
        }
        .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        objects.push(LabeledObject {
            class,
            bbox,
            occlusion: occ as u8,
            truncation: v[0],
            bbox_height: v[6] - v[4],
        });
    }
    Ok(FrameAnnotation {
        frame_id: frame_id.to_string(),
        objects,
    })
}

pub fn read_kitti_labels(path: &Path, calib: &Calibration) -> Result<FrameAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    parse_kitti_labels(&text, id, calib, path)
}

/// Writes detections as KITTI result rows (label format plus a trailing
/// score). The 2D box is a placeholder.
pub fn write_kitti_results(path: &Path, dets: &[Detection], calib: &Calibration) -> Result<()> {
    let mut s = String::new();
    for d in dets {
        let (hwl, loc, ry) = calib.box_to_camera(&d.bbox);
        let alpha = ry - loc[0].atan2(loc[2]);
        let _ = writeln!(
            s,
            "{} 0 0 {} 0 0 100 100 {} {} {} {} {} {} {} {}",
            d.class, alpha, hwl[0], hwl[1], hwl[2], loc[0], loc[1], loc[2], ry, d.score
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_kitti_results(path: &Path, calib: &Calibration) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (class, v) = fields(line, path, i + 1, 15)?;
        let bbox = calib
            .box_from_camera([v[7], v[8], v[9]], [v[10], v[11], v[12]], v[13])
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(Detection {
            class,
            bbox,
            score: v[14],
        });
    }
    Ok(out)
}

/// One frame id per non-empty line.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// A KITTI-layout directory: `velodyne/`, `label_2/`, `calib/` and
/// `ImageSets/<split>.txt`.
#[derive(Clone, Debug)]
pub struct KittiDataset {
    pub root: PathBuf,
}

impl KittiDataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn velodyne_path(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib_path(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.root.join("ImageSets").join(format!("{split}.txt"))
    }

    pub fn split(&self, split: &str) -> Result<Vec<String>> {
        read_split(&self.split_path(split))
    }

    /// Missing calibration files fall back to the nominal mounting.
    pub fn calibration(&self, id: &str) -> Result<Calibration> {
        let p = self.calib_path(id);
        if p.exists() {
            Calibration::read(&p)
        } else {
            Ok(Calibration::kitti_nominal())
        }
    }

    pub fn load_cloud(&self, id: &str) -> Result<PointCloud> {
        super::read_velodyne_bin(&self.velodyne_path(id))
    }

    /// Frames without a label file get an empty annotation.
    pub fn load_frame(&self, id: &str) -> Result<(PointCloud, FrameAnnotation, Calibration)> {
        let calib = self.calibration(id)?;
        let cloud = self.load_cloud(id)?;
        let lp = self.label_path(id);
        let ann = if lp.exists() {
            let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            parse_kitti_labels(&text, id, &calib, &lp)?
        } else {
            FrameAnnotation {
                frame_id: id.to_string(),
                objects: Vec::new(),
            }
        };
        Ok((cloud, ann, calib))
    }

    /// Writes one frame in KITTI layout, creating directories as needed.
    pub fn write_frame(&self, id: &str, cloud: &PointCloud, ann: &FrameAnnotation, calib: &Calibration) -> Result<()> {
        for d in ["velodyne", "label_2", "calib"] {
            let p = self.root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        super::write_velodyne_bin(&self.velodyne_path(id), cloud)?;
        let cp = self.calib_path(id);
        fs::write(&cp, calib.to_kitti_string()).map_err(|e| Error::io(&cp, e))?;
        let mut s = String::new();
        for o in &ann.objects {
            let (hwl, loc, ry) = calib.box_to_camera(&o.bbox);
            let alpha = ry - loc[0].atan2(loc[2]);
            let _ = writeln!(
                s,
                "{} {} {} {} 0 {} 100 {} {} {} {} {} {} {} {}",
                o.class,
                o.truncation,
                o.occlusion,
                alpha,
                300.0 - o.bbox_height,
                300.0,
                hwl[0],
                hwl[1],
                hwl[2],
                loc[0],
                loc[1],
                loc[2],
                ry
            );
        }
        let lp = self.label_path(id);
        fs::write(&lp, s).map_err(|e| Error::io(&lp, e))
    }

    pub fn write_split(&self, split: &str, ids: &[String]) -> Result<()> {
        let p = self.split_path(split);
        let dir = p.parent().expect("split path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&p, ids.join("\n") + "\n").map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LABEL: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n\
                         DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n";

    #[test]
    fn dontcare_is_ignorable() {
        let a = parse_kitti_labels(LABEL, "000000", &Calibration::kitti_nominal(), Path::new("l.txt")).unwrap();
        assert_eq!(a.objects.len(), 2);
        assert!(!a.objects[0].is_ignorable());
        assert!(a.objects[1].is_ignorable());
        assert_eq!(a.targets().count(), 1);
        assert!((a.objects[0].bbox_height - 26.79).abs() < 1e-9);
    }

    #[test]
    fn identity_calibration_origin() {
        let row = "Car 0 0 0 0 0 10 10 2.0 1.0 3.0 0 0 0 0\n";
        let a = parse_kitti_labels(row, "x", &Calibration::identity(), Path::new("l")).unwrap();
        let b = a.objects[0].bbox;
        // The centre sits half a height above the bottom-centre location,
        // i.e. at camera y = -1.
        assert_eq!([b.x, b.y, b.z], [0.0, -1.0, 0.0]);
    }

    #[test]
    fn nominal_mounting_maps_forward_to_x() {
        let c = Calibration::kitti_nominal();
        let p = c.cam_to_lidar([1.0, 2.0, 10.0]);
        assert_eq!(p, [10.0, -1.0, -2.0]);
        for ry in [-3.0, -1.2, 0.0, 0.7, 2.5] {
            let back = c.yaw_to_ry(c.ry_to_yaw(ry));
            assert!(crate::geometry::normalize_angle(back - ry).abs() < 1e-12);
        }
        // Facing camera x (ry = 0) means facing LiDAR -y.
        let yaw = c.ry_to_yaw(0.0);
        assert!((crate::geometry::normalize_angle(yaw) + std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "Car 0 0 0 0 0 10 10 2 1 3 0 0 5 0\nCar 0 0 zero\n";
        match parse_kitti_labels(text, "x", &Calibration::identity(), Path::new("l")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn calib_text_round_trip() {
        let mut c = Calibration::kitti_nominal();
        c.velo_trans = Vector3::new(0.1, -0.2, 0.3);
        c.r0_rect[(0, 1)] = 0.01;
        let back = Calibration::parse(&c.to_kitti_string(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }
}
