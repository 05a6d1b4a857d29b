use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::RangeSpec;
use crate::tensor::Tensor;

/// Point count at which the density channel reaches 1.
pub const DENSITY_SATURATION: usize = 63;

/// Planar raster over a range. Columns index x, rows index y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub range: RangeSpec,
    /// `(Δx, Δy)` in meters.
    pub cell: [f64; 2],
}

impl GridSpec {
    /// 608 × 608 cells of 0.1 m over the KITTI range.
    pub const KITTI: GridSpec = GridSpec {
        range: RangeSpec::KITTI,
        cell: [0.1, 0.1],
    };

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        let e = self.range.extent();
        for (axis, ext, c) in [("x", e[0], self.cell[0]), ("y", e[1], self.cell[1])] {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grid cell {axis} must be positive, got {c}")));
            }
            let n = (ext / c).round();
            if n < 1.0 || (n * c - ext).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "grid {axis}: extent {ext} is not a whole number of {c} m cells"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        (self.range.extent()[0] / self.cell[0]).round() as usize
    }

    pub fn height(&self) -> usize {
        (self.range.extent()[1] / self.cell[1]).round() as usize
    }

    /// `(row, col)` of a planar position; the max boundary falls into the
    /// last cell. `None` outside the range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = &self.range;
        if !(r.x_min..=r.x_max).contains(&x) || !(r.y_min..=r.y_max).contains(&y) {
            return None;
        }
        let col = (((x - r.x_min) / self.cell[0]).floor() as usize).min(self.width() - 1);
        let row = (((y - r.y_min) / self.cell[1]).floor() as usize).min(self.height() - 1);
        Some((row, col))
    }
}

/// Channels: 0 density, 1 max height, 2 max intensity; each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMap {
    pub data: Tensor,
    /// Points per cell, row-major.
    pub counts: Vec<u32>,
}

impl BevMap {
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Interleaved 8-bit RGB, `round(255 · channel)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        let mut out = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for c in 0..3 {
                out.push((d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width() as u32, self.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_io)?;
        w.write_image_data(&self.to_rgb8()).map_err(to_io)?;
        w.finish().map_err(to_io)
    }
}

/// Rasterizes a range-filtered cloud. Points outside the grid are skipped.
///
/// Per cell: density `min(1, ln(N+1) / ln 64)`, height
/// `(max z - z_min) / (z_max - z_min)`, intensity `max r` clamped to 1.
pub fn encode_bev_map(cloud: &PointCloud, grid: &GridSpec) -> BevMap {
    let (h, w) = (grid.height(), grid.width());
    let r = &grid.range;
    let mut counts = vec![0u32; h * w];
    let mut zmax = vec![f64::NEG_INFINITY; h * w];
    let mut rmax = vec![0.0f64; h * w];
    for p in cloud.iter() {
        if p.z < r.z_min || p.z > r.z_max {
            continue;
        }
        let Some((row, col)) = grid.cell_of(p.x, p.y) else {
            continue;
        };
        let i = row * w + col;
        counts[i] += 1;
        zmax[i] = zmax[i].max(p.z);
        rmax[i] = rmax[i].max(p.r.clamp(0.0, 1.0));
    }
    let mut data = vec![0.0; 3 * h * w];
    let ln64 = ((DENSITY_SATURATION + 1) as f64).ln();
    let zext = r.z_max - r.z_min;
    for i in 0..h * w {
        let n = counts[i];
        if n == 0 {
            continue;
        }
        data[i] = (((n + 1) as f64).ln() / ln64).min(1.0);
        data[h * w + i] = ((zmax[i] - r.z_min) / zext).clamp(0.0, 1.0);
        data[2 * h * w + i] = rmax[i];
    }
    BevMap {
        data: Tensor::new(&[3, h, w], data).expect("consistent shape"),
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;

    #[test]
    fn kitti_grid_is_608_square() {
        GridSpec::KITTI.validate().unwrap();
        assert_eq!((GridSpec::KITTI.width(), GridSpec::KITTI.height()), (608, 608));
    }

    #[test]
    fn max_boundary_clamps_into_last_cell() {
        let g = GridSpec::KITTI;
        assert_eq!(g.cell_of(60.8, 30.4), Some((607, 607)));
        assert_eq!(g.cell_of(0.0, -30.4), Some((0, 0)));
        assert_eq!(g.cell_of(-0.01, 0.0), None);
    }

    #[test]
    fn single_point_cell() {
        let c = PointCloud::new(vec![Point::new(0.05, -30.35, -1.0, 0.8)]);
        let m = encode_bev_map(&c, &GridSpec::KITTI);
        let d = m.data.data();
        let plane = 608 * 608;
        assert!((d[0] - 2f64.ln() / 64f64.ln()).abs() < 1e-12);
        assert!((d[plane] - 0.5).abs() < 1e-12);
        assert!((d[2 * plane] - 0.8).abs() < 1e-12);
        assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn rgb_rounding() {
        let c = PointCloud::new(vec![Point::new(0.05, -30.35, -1.0, 0.8)]);
        let m = encode_bev_map(&c, &GridSpec::KITTI);
        assert_eq!(&m.to_rgb8()[1..3], &[128, 204]);
    }
}
