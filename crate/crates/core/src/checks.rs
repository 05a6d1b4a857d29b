//! Finite-difference gradient checks of every network block and loss on
//! small shapes.

use rand::Rng;

use crate::dataset::{LabeledObject, ObjectClass, Point};
use crate::error::Result;
use crate::geometry::{Box3D, RangeSpec};
use crate::head::{build_targets, generate_anchors, head_loss, AnchorClass, DetectionHead, LossWeights, BOX_CODE, YAW_INDEX};
use crate::neck::{AlignStage, AttentionFuse, MspFusion};
use crate::preprocess::VoxelSet;
use crate::projection::{BackboneStage, FuseStage};
use crate::rng;
use crate::tensor::nn::Linear;
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::voxel_branch::{mask_tensor, Pfw, ScoreHead, Svfe, Vfe, VoxelBranch, VoxelBranchConfig, VoxelStage, VoxelToBev};

/// Central-difference step.
pub const EPS: f64 = 1e-5;

/// Bound on the worst relative error for network blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-4;

/// Bound for the purely linear probe.
pub const LINEAR_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts the block output with fixed random weights to a scalar, so
/// every output coordinate contributes to the checked gradient.
fn reduced(store: &ParamStore, seed: u64, f: impl Fn(&mut Graph) -> Result<Var>) -> Result<GradCheckReport> {
    let shape = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        g.shape(y).to_vec()
    };
    let w = random(&mut rng::derived(seed, "reduce"), &shape);
    grad_check(store, EPS, |g| {
        let y = f(g)?;
        let c = g.constant(w.clone());
        let m = g.mul(y, c)?;
        Ok(g.sum(m))
    })
}

/// Four voxels in a `[4, 4, 4]` grid holding 1–4 points each.
pub fn toy_voxels() -> VoxelSet {
    let p = |x, y, z, r| Point::new(x, y, z, r);
    let points = vec![
        vec![p(0.11, 0.12, 0.13, 0.5), p(0.17, 0.05, 0.19, 0.2), p(0.03, 0.18, 0.02, 0.9)],
        vec![p(0.31, 0.05, 0.07, 0.4)],
        vec![
            p(0.71, 0.62, 0.35, 0.1),
            p(0.77, 0.68, 0.31, 0.3),
            p(0.74, 0.61, 0.38, 0.6),
            p(0.72, 0.66, 0.33, 0.8),
        ],
        vec![p(0.52, 0.25, 0.61, 0.7), p(0.55, 0.27, 0.66, 0.1)],
    ];
    let coords = vec![[0, 0, 0], [0, 0, 1], [1, 3, 3], [3, 1, 2]];
    VoxelSet::from_points(points, coords, [4, 4, 4], 4)
}

fn store_with_input(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut r = rng::derived(seed, "inputs");
    let mut store = ParamStore::new();
    for (n, s) in shapes {
        store.insert(*n, random(&mut r, s));
    }
    store
}

/// Runs every block check. All use [`EPS`]; tolerances are per entry.
pub fn run_all(seed: u64) -> Result<Vec<BlockCheck>> {
    let mut out = Vec::new();
    let mut push = |name, report, tolerance| {
        out.push(BlockCheck { name, report, tolerance });
    };
    let init = |tag: &str| rng::derived(seed, tag);
    let set = toy_voxels();
    let mask = set.mask();
    let (v, n) = (set.num_voxels(), set.max_points);

    {
        let mut s = store_with_input(seed, &[("input", &[5, 3, 2])]);
        let lin = Linear::new(&mut s, &mut init("linear"), "linear", 5, 4);
        push("linear_probe", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            lin.forward(g, x)
        })?, LINEAR_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[10, v, n])]);
        let b = Vfe::new(&mut s, &mut init("vfe"), "vfe", 10, 8);
        let mt = mask_tensor(&set);
        push("vfe", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            let m = g.constant(mt.clone());
            b.forward(g, x, &mask, m)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[8, v, n])]);
        let b = Pfw::new(&mut s, &mut init("pfw"), "pfw", 8);
        push("pfw_net", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            b.forward(g, x, &mask)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[8, v, n])]);
        let b = ScoreHead::new(&mut s, &mut init("score"), "score", 8);
        push("revoxelization_score_head", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            let w = b.forward(g, x, &mask)?;
            g.mul_bcast(x, w)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[10, v, n])]);
        let b = Svfe::new(&mut s, &mut init("svfe"), "svfe", 10, 8);
        let mt = mask_tensor(&set);
        push("svfe", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            let m = g.constant(mt.clone());
            b.forward(g, x, &mask, m)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[4, v, n])]);
        let b = VoxelToBev::new(&mut s, &mut init("v2b"), "v2b", 16, 3);
        push("voxel_to_bev", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            let d = VoxelToBev::scatter(g, x, &set)?;
            b.convs(g, d)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = ParamStore::new();
        let cfg = VoxelBranchConfig {
            stem_channels: 4,
            stages: vec![
                VoxelStage {
                    planar: 2,
                    depth: 2,
                    points: 32,
                    channels: 4,
                },
                VoxelStage {
                    planar: 2,
                    depth: 2,
                    points: 32,
                    channels: 4,
                },
            ],
            oversample: 8.0,
        };
        let b = VoxelBranch::new(&mut s, &mut init("branch"), &cfg, 4, &[3, 3])?;
        push("voxel_branch", reduced(&s, seed, |g| {
            let outs = b.forward(g, &set, &mut init("revoxelize"))?;
            let flat = outs
                .iter()
                .map(|o| {
                    let n = g.value(o.bev).numel();
                    g.reshape(o.bev, &[n])
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat(&flat, 0)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[3, 8, 8])]);
        let b = BackboneStage::new(&mut s, &mut init("stage"), "stage", 3, 4, [2, 1]);
        push("backbone_stage", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            b.forward(g, x)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("bev", &[4, 4, 4]), ("voxel", &[3, 4, 4])]);
        let b = FuseStage::new(&mut s, &mut init("fuse"), 1, 4, 3);
        push("fuse_stage", reduced(&s, seed, |g| {
            let x = g.param("bev")?;
            let y = g.param("voxel")?;
            b.forward(g, x, y)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("voxel", &[6, 3, 3]), ("bev", &[4, 3, 3])]);
        let b = MspFusion::new(&mut s, &mut init("msp"), "msp", 6, 4);
        push("msp_fusion", reduced(&s, seed, |g| {
            let x = g.param("voxel")?;
            let y = g.param("bev")?;
            b.forward(g, x, y)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[3, 2, 2])]);
        let b = AlignStage::new(&mut s, &mut init("up"), "up", 3, 2, 4, 2)?;
        push("align_stage_up", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            b.forward(g, x)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[3, 8, 8])]);
        let b = AlignStage::new(&mut s, &mut init("down"), "down", 3, 8, 4, 2)?;
        push("align_stage_down", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            b.forward(g, x)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("a", &[3, 5, 5]), ("b", &[3, 5, 5]), ("c", &[3, 5, 5])]);
        let b = AttentionFuse::new(&mut s, &mut init("att"), "att", 3, 3);
        push("attention_fusion", reduced(&s, seed, |g| {
            let src = [g.param("a")?, g.param("b")?, g.param("c")?];
            b.forward(g, &src)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut s = store_with_input(seed, &[("input", &[4, 4, 4])]);
        let head = DetectionHead::new(&mut s, &mut init("head"), 4, 1);
        let range = RangeSpec {
            x_min: 0.0,
            x_max: 8.0,
            y_min: -4.0,
            y_max: 4.0,
            z_min: -3.0,
            z_max: 1.0,
        };
        let anchors = generate_anchors(&range, 4, 4, &[AnchorClass::car()]);
        let gt = LabeledObject {
            class: ObjectClass::Car,
            bbox: Box3D::new([3.2, -0.8, -0.9], [1.7, 4.0, 1.5], 0.4)?,
            occlusion: 0,
            truncation: 0.0,
            bbox_height: 60.0,
        };
        let t = build_targets(&anchors, &[gt])?;
        let w = LossWeights::default();
        push("detection_head", reduced(&s, seed, |g| {
            let x = g.param("input")?;
            let o = head.forward(g, x)?;
            Ok(head_loss(g, &o, &t, &w)?.total)
        })?, BLOCK_TOLERANCE);
    }
    {
        let mut r = init("loss_targets");
        let s = store_with_input(seed, &[("logits", &[2, 3, 3]), ("reg", &[2 * BOX_CODE, 3, 3])]);
        let labels = Tensor::from_fn(&[2, 3, 3], |i| (i % 3 == 0) as u8 as f64);
        let weights = Tensor::from_fn(&[2, 3, 3], |_| r.gen_range(0.0..1.0));
        let targets = random(&mut r, &[2 * BOX_CODE, 3, 3]);
        let w = LossWeights::default();
        push("focal_loss", reduced(&s, seed, |g| {
            let z = g.param("logits")?;
            g.focal_loss(z, &labels, &weights, w.focal_alpha, w.focal_gamma)
        })?, BLOCK_TOLERANCE);
        push("smooth_l1_loss", reduced(&s, seed, |g| {
            let p = g.param("reg")?;
            g.box_regression_loss(p, &targets, &weights, BOX_CODE, Some(YAW_INDEX))
        })?, BLOCK_TOLERANCE);
        push("direction_loss", reduced(&s, seed, |g| {
            let z = g.param("logits")?;
            g.bce_loss(z, &labels, &weights)
        })?, BLOCK_TOLERANCE);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_voxels_are_consistent() {
        let s = toy_voxels();
        assert_eq!(s.num_voxels(), 4);
        assert_eq!(s.mask().iter().filter(|&&m| m).count(), 10);
    }
}
