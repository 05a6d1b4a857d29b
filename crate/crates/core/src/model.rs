//! Full detector: voxel branch, BEV backbone with per-stage fusion, neck
//! and detection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, FrameAnnotation, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::RangeSpec;
use crate::head::{build_targets, generate_anchors, head_loss, predict, AnchorGrid, DetectionHead, HeadConfig, HeadOutput, LossVars};
use crate::neck::{Neck, NeckConfig};
use crate::preprocess::{encode_bev_map, filter_range, voxelize, BevMap, GridSpec, VoxelSet, VoxelSpec};
use crate::projection::{BackboneConfig, ProjectionBranch};
use crate::tensor::{Graph, ParamStore, Var};
use crate::voxel_branch::{VoxelBranch, VoxelBranchConfig, VoxelStage, VoxelStageOutput};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub voxel: VoxelBranchConfig,
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Narrow widths for CPU-scale training runs.
    pub fn toy() -> Self {
        let st = |planar, channels| VoxelStage {
            planar,
            depth: planar,
            points: 16,
            channels,
        };
        Self {
            voxel: VoxelBranchConfig {
                stem_channels: 8,
                stages: vec![st(4, 8), st(2, 8), st(2, 16), st(2, 16)],
                oversample: 2.0,
            },
            backbone: BackboneConfig {
                widths: vec![8, 16, 16, 16, 16],
            },
            neck: NeckConfig { width: 32 },
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        if self.voxel.stages.len() != 4 {
            return Err(Error::Config("voxel branch needs exactly four stages".into()));
        }
        if self.neck.width == 0 {
            return Err(Error::Config("neck width must be positive".into()));
        }
        Ok(())
    }
}

/// One preprocessed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bev: BevMap,
    pub voxels: VoxelSet,
}

pub struct ForwardPass {
    pub voxel: Vec<VoxelStageOutput>,
    /// Fused BEV features of stages 1..=4.
    pub projection: Vec<Var>,
    pub neck: Var,
    pub head: HeadOutput,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub voxel_spec: VoxelSpec,
    /// Side lengths of backbone stages 0..=4.
    pub resolutions: [usize; 5],
    pub anchors: AnchorGrid,
    voxel: VoxelBranch,
    projection: ProjectionBranch,
    neck: Neck,
    head: DetectionHead,
}

/// Checks that the voxel grid covers the BEV grid and that every voxel
/// stage lands on its backbone stage resolution.
fn check_grids(cfg: &ModelConfig, grid: &GridSpec, vs: &VoxelSpec) -> Result<[usize; 5]> {
    grid.validate()?;
    vs.validate()?;
    if grid.width() != grid.height() {
        return Err(Error::Config(format!(
            "BEV grid must be square, got {}x{}",
            grid.height(),
            grid.width()
        )));
    }
    let res = BackboneConfig::resolutions(grid.width())?;
    let same_plane = |a: &RangeSpec, b: &RangeSpec| {
        [a.x_min - b.x_min, a.x_max - b.x_max, a.y_min - b.y_min, a.y_max - b.y_max]
            .iter()
            .all(|d| d.abs() < 1e-9)
    };
    if !same_plane(&grid.range, &vs.range) {
        return Err(Error::Config("voxel and BEV grids must cover the same planar range".into()));
    }
    let [mut d, mut h, mut w] = vs.dims();
    for (i, st) in cfg.voxel.stages.iter().enumerate() {
        if h % st.planar != 0 || w % st.planar != 0 || d % st.depth != 0 {
            return Err(Error::Config(format!(
                "voxel grid {:?} not divisible at stage {}",
                vs.dims(),
                i + 1
            )));
        }
        (d, h, w) = (d / st.depth, h / st.planar, w / st.planar);
        if h != res[i + 1] || w != res[i + 1] {
            return Err(Error::Config(format!(
                "voxel stage {} is {h}x{w} but backbone stage is {r}x{r}",
                i + 1,
                r = res[i + 1]
            )));
        }
    }
    Ok(res)
}

impl Detector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &ModelConfig, grid: &GridSpec, voxel_spec: &VoxelSpec) -> Result<Self> {
        config.validate()?;
        let res = check_grids(config, grid, voxel_spec)?;
        let bev_widths = &config.backbone.widths[1..];
        let depth = voxel_spec.dims()[0];
        let voxel = VoxelBranch::new(store, rng, &config.voxel, depth, bev_widths)?;
        let projection = ProjectionBranch::new(store, rng, &config.backbone, 3, bev_widths)?;
        let mut d = depth;
        let dense_channels: Vec<usize> = config
            .voxel
            .stages
            .iter()
            .map(|s| {
                d /= s.depth;
                s.channels * d
            })
            .collect();
        let neck = Neck::new(store, rng, &config.neck, &dense_channels, bev_widths, &res[1..])?;
        let head = DetectionHead::new(store, rng, config.neck.width, config.head.anchors.len());
        let anchors = generate_anchors(&grid.range, res[1], res[1], &config.head.anchors);
        Ok(Self {
            config: config.clone(),
            grid: *grid,
            voxel_spec: *voxel_spec,
            resolutions: res,
            anchors,
            voxel,
            projection,
            neck,
            head,
        })
    }

    /// Crops `cloud` to the grid range and builds both input encodings.
    pub fn prepare(&self, cloud: &PointCloud, rng: &mut impl Rng) -> Sample {
        let cropped = filter_range(cloud, &self.grid.range);
        Sample {
            bev: encode_bev_map(&cropped, &self.grid),
            voxels: voxelize(&cropped, &self.voxel_spec, rng),
        }
    }

    /// `rng` drives re-voxelization subsampling.
    pub fn forward(&self, g: &mut Graph, sample: &Sample, rng: &mut impl Rng) -> Result<ForwardPass> {
        let voxel = self.voxel.forward(g, &sample.voxels, rng)?;
        log::debug!("voxel branch: {} nodes, {} values", g.len(), g.stored_values());
        let bev_in = g.constant(sample.bev.data.clone());
        let voxel_bev: Vec<Var> = voxel.iter().map(|o| o.bev).collect();
        let projection = self.projection.forward(g, bev_in, &voxel_bev)?;
        log::debug!("projection branch: {} nodes, {} values", g.len(), g.stored_values());
        let dense: Vec<Var> = voxel.iter().map(|o| o.dense).collect();
        let neck = self.neck.forward(g, &dense, &projection)?;
        log::debug!("neck: {} nodes, {} values", g.len(), g.stored_values());
        let head = self.head.forward(g, neck)?;
        Ok(ForwardPass {
            voxel,
            projection,
            neck,
            head,
        })
    }

    pub fn loss(&self, g: &mut Graph, sample: &Sample, ann: &FrameAnnotation, rng: &mut impl Rng) -> Result<LossVars> {
        let fp = self.forward(g, sample, rng)?;
        let targets = build_targets(&self.anchors, &ann.objects)?;
        head_loss(g, &fp.head, &targets, &self.config.head.loss)
    }

    pub fn detect(&self, store: &ParamStore, sample: &Sample, rng: &mut impl Rng) -> Result<Vec<Detection>> {
        let mut g = Graph::with_params(store);
        let fp = self.forward(&mut g, sample, rng)?;
        predict(
            g.value(fp.head.cls),
            g.value(fp.head.reg),
            g.value(fp.head.dir),
            &self.anchors,
            &self.config.head,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;
    use crate::rng;

    pub(crate) fn toy_grids() -> (GridSpec, VoxelSpec) {
        let range = RangeSpec {
            x_min: 0.0,
            x_max: 12.8,
            y_min: -6.4,
            y_max: 6.4,
            z_min: -3.0,
            z_max: 1.0,
        };
        (
            GridSpec { range, cell: [0.2, 0.2] },
            VoxelSpec {
                range,
                voxel_size: [0.2, 0.2, 0.125],
                max_voxels: 4000,
                max_points: 8,
            },
        )
    }

    #[test]
    fn toy_model_shapes() {
        let (grid, vs) = toy_grids();
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, &mut rng::seeded(0), &ModelConfig::toy(), &grid, &vs).unwrap();
        assert_eq!(det.resolutions, [16, 16, 8, 4, 2]);
        let cloud: PointCloud = (0..300)
            .map(|i| {
                let t = i as f64;
                Point::new(1.0 + (t * 0.731) % 11.0, -5.0 + (t * 0.377) % 10.0, -2.0 + (t * 0.05) % 2.5, 0.3)
            })
            .collect();
        let s = det.prepare(&cloud, &mut rng::seeded(1));
        let mut g = Graph::with_params(&store);
        let fp = det.forward(&mut g, &s, &mut rng::seeded(2)).unwrap();
        assert_eq!(g.shape(fp.neck), &[32, 16, 16]);
        assert_eq!(g.shape(fp.head.cls), &[4, 16, 16]);
        assert_eq!(g.shape(fp.head.reg), &[28, 16, 16]);
        for (o, &r) in fp.voxel.iter().zip(&det.resolutions[1..]) {
            assert_eq!(&g.shape(o.bev)[1..], &[r, r]);
        }
    }

    #[test]
    fn mismatched_voxel_grid_is_rejected() {
        let (grid, mut vs) = toy_grids();
        vs.voxel_size = [0.1, 0.1, 0.125];
        let err = Detector::new(&mut ParamStore::new(), &mut rng::seeded(0), &ModelConfig::toy(), &grid, &vs);
        assert!(err.is_err());
    }
}
