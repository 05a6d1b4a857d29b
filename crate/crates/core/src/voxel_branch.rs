//! Point-wise voxel feature stack: SVFE blocks, weight-based
//! re-voxelization into coarser grids, and per-stage voxel → BEV maps.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{VoxelSet, POINT_FEATURES};
use crate::tensor::nn::{Conv2d, FcBlock, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelStage {
    /// Planar merge factor relative to the previous stage.
    pub planar: usize,
    /// Vertical merge factor relative to the previous stage.
    pub depth: usize,
    /// Target points per coarse voxel `K`.
    pub points: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelBranchConfig {
    /// Width of the stage-0 SVFE.
    pub stem_channels: usize,
    pub stages: Vec<VoxelStage>,
    /// Over-sampling ratio used to size the per-fine-voxel keep count.
    pub oversample: f64,
}

impl Default for VoxelBranchConfig {
    fn default() -> Self {
        let st = |planar, channels| VoxelStage {
            planar,
            depth: planar,
            points: 32,
            channels,
        };
        Self {
            stem_channels: 32,
            stages: vec![st(4, 64), st(2, 128), st(2, 256), st(2, 256)],
            oversample: 2.0,
        }
    }
}

impl VoxelBranchConfig {
    pub fn validate(&self) -> Result<()> {
        let even = |c: usize| c >= 4 && c % 2 == 0;
        if !even(self.stem_channels) || self.stages.iter().any(|s| !even(s.channels)) {
            return Err(Error::Config("voxel branch widths must be even and at least 4".into()));
        }
        if self.stages.iter().any(|s| s.planar == 0 || s.depth == 0 || s.points == 0) {
            return Err(Error::Config("voxel stage factors and point counts must be positive".into()));
        }
        if !(self.oversample > 0.0) {
            return Err(Error::Config("voxel oversample must be positive".into()));
        }
        Ok(())
    }
}

/// `ceil(K · ratio / f²)` clamped to `[1, n]`, where `f²` fine voxels merge
/// into each coarse column.
pub fn keep_count(k: usize, ratio: f64, planar: usize, n: usize) -> usize {
    let raw = (k as f64 * ratio / (planar * planar) as f64).ceil() as usize;
    raw.clamp(1, n.max(1))
}

/// Indices of the `k` largest weights, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_slots(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// `(1, V, N)` tensor of ones on real points.
pub fn mask_tensor(set: &VoxelSet) -> Tensor {
    let data = set.mask().into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, set.num_voxels(), set.max_points], data).expect("mask shape")
}

/// Linear → GeLU → LN to `c_out/2`, concatenated with the voxel-wise masked
/// max of that output.
#[derive(Clone, Debug)]
pub struct Vfe {
    block: FcBlock,
}

impl Vfe {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        assert!(cout % 2 == 0, "VFE width must be even");
        Self {
            block: FcBlock::new(store, rng, name, cin, cout / 2),
        }
    }

    /// `x (c_in, V, N)` → `(c_out, V, N)`, zero on padded slots.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool], mask_t: Var) -> Result<Var> {
        let n = g.shape(x)[2];
        let h = self.block.forward(g, x)?;
        let h = g.mul_bcast(h, mask_t)?;
        let pooled = g.max_over_points(h, mask)?;
        let pooled = g.repeat_last(pooled, n)?;
        let cat = g.concat(&[h, pooled], 0)?;
        g.mul_bcast(cat, mask_t)
    }
}

/// Per-point weights from two linear layers and a softmax over the voxel's
/// real points; features are scaled by their weight.
#[derive(Clone, Debug)]
pub struct Pfw {
    l1: Linear,
    l2: Linear,
}

impl Pfw {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), c, (c / 2).max(1)),
            l2: Linear::new(store, rng, &format!("{name}.l2"), (c / 2).max(1), 1),
        }
    }

    /// Weights `(1, V, N)`.
    pub fn weights(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.gelu(h);
        let logit = self.l2.forward(g, h)?;
        g.masked_softmax(logit, mask, 2)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let w = self.weights(g, x, mask)?;
        g.mul_bcast(x, w)
    }
}

/// Three-layer point scorer `C → C/2 → C/4 → 1` with a per-voxel softmax,
/// used to pick the points that survive re-voxelization.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    layers: [Linear; 3],
}

impl ScoreHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        let (c2, c4) = ((c / 2).max(1), (c / 4).max(1));
        Self {
            layers: [
                Linear::new(store, rng, &format!("{name}.l1"), c, c2),
                Linear::new(store, rng, &format!("{name}.l2"), c2, c4),
                Linear::new(store, rng, &format!("{name}.l3"), c4, 1),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.gelu(h);
        let h = self.layers[1].forward(g, h)?;
        let h = g.gelu(h);
        let logit = self.layers[2].forward(g, h)?;
        g.masked_softmax(logit, mask, 2)
    }
}

/// VFE → FC block → PFW.
#[derive(Clone, Debug)]
pub struct Svfe {
    vfe: Vfe,
    fc: FcBlock,
    pfw: Pfw,
    pub cout: usize,
}

impl Svfe {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            vfe: Vfe::new(store, rng, &format!("{name}.vfe"), cin, cout),
            fc: FcBlock::new(store, rng, &format!("{name}.fc"), cout, cout),
            pfw: Pfw::new(store, rng, &format!("{name}.pfw"), cout),
            cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool], mask_t: Var) -> Result<Var> {
        let h = self.vfe.forward(g, x, mask, mask_t)?;
        let h = self.fc.forward(g, h)?;
        self.pfw.forward(g, h, mask)
    }
}

/// Coarse voxels built from the top-weighted points of fine voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Revoxelized {
    /// Coarse geometry with freshly computed 10-dim encodings.
    pub set: VoxelSet,
    /// `(fine voxel, slot)` for every coarse slot; `None` is padding.
    pub index: Vec<Option<(usize, usize)>>,
}

/// Selects the top-`k_keep` points of each fine voxel by `weights`
/// (length `V·N`), merges them into `planar × planar × depth` blocks in
/// fine-voxel order, and subsamples each pool above `points` with `rng`.
pub fn revoxelize(fine: &VoxelSet, weights: &[f64], stage: &VoxelStage, k_keep: usize, rng: &mut impl Rng) -> Result<Revoxelized> {
    let n = fine.max_points;
    if weights.len() != fine.num_voxels() * n {
        return Err(Error::shape(
            "revoxelize",
            format!("{} weights for {} voxels of {n}", weights.len(), fine.num_voxels()),
        ));
    }
    let [d, h, w] = fine.dims;
    if d % stage.depth != 0 || h % stage.planar != 0 || w % stage.planar != 0 {
        return Err(Error::Config(format!(
            "grid {:?} not divisible by factors ({}, {})",
            fine.dims, stage.depth, stage.planar
        )));
    }
    let dims = [d / stage.depth, h / stage.planar, w / stage.planar];
    let mut slot: HashMap<[usize; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut pools: Vec<Vec<(usize, usize)>> = Vec::new();
    for (v, &[z, y, x]) in fine.coords.iter().enumerate() {
        let count = fine.counts[v];
        if count == 0 {
            continue;
        }
        let key = [z / stage.depth, y / stage.planar, x / stage.planar];
        let c = *slot.entry(key).or_insert_with(|| {
            coords.push(key);
            pools.push(Vec::new());
            coords.len() - 1
        });
        let kept = top_k_slots(&weights[v * n..v * n + count], k_keep);
        pools[c].extend(kept.into_iter().map(|s| (v, s)));
    }
    let k = stage.points;
    let mut index = Vec::with_capacity(pools.len() * k);
    let mut points = Vec::with_capacity(pools.len());
    for pool in &mut pools {
        if pool.len() > k {
            let mut pick = sample(rng, pool.len(), k).into_vec();
            pick.sort_unstable();
            *pool = pick.into_iter().map(|i| pool[i]).collect();
        }
        points.push(pool.iter().map(|&(v, s)| fine.points[v][s]).collect());
        index.extend(pool.iter().map(|&p| Some(p)));
        index.extend(std::iter::repeat_n(None, k - pool.len()));
    }
    Ok(Revoxelized {
        set: VoxelSet::from_points(points, coords, dims, k),
        index,
    })
}

/// Masked max over points → dense `(C·D', H', W')` scatter → 1×1 → 3×3.
#[derive(Clone, Debug)]
pub struct VoxelToBev {
    reduce: Conv2d,
    mix: Conv2d,
}

impl VoxelToBev {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, cout: usize) -> Self {
        Self {
            reduce: Conv2d::new(store, rng, &format!("{name}.reduce"), c_in, cout, 1, 1),
            mix: Conv2d::new(store, rng, &format!("{name}.mix"), cout, cout, 3, 1),
        }
    }

    /// Dense scatter before the convolutions.
    pub fn scatter(g: &mut Graph, x: Var, set: &VoxelSet) -> Result<Var> {
        let pooled = g.max_over_points(x, &set.mask())?;
        g.scatter_voxels(pooled, &set.coords, set.dims)
    }

    pub fn convs(&self, g: &mut Graph, dense: Var) -> Result<Var> {
        let h = self.reduce.forward(g, dense)?;
        self.mix.forward(g, h)
    }
}

pub struct VoxelStageOutput {
    /// `(C·D', H', W')` before the BEV convolutions.
    pub dense: Var,
    /// `(C', H', W')`.
    pub bev: Var,
    pub set: VoxelSet,
}

#[derive(Clone, Debug)]
pub struct VoxelBranch {
    pub config: VoxelBranchConfig,
    stem: Svfe,
    scorers: Vec<ScoreHead>,
    blocks: Vec<Svfe>,
    to_bev: Vec<VoxelToBev>,
}

impl VoxelBranch {
    /// `depth` is the number of vertical bins of the input grid and
    /// `bev_widths` the projection widths of stages 1..=4.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &VoxelBranchConfig,
        depth: usize,
        bev_widths: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        if bev_widths.len() != config.stages.len() {
            return Err(Error::Config(format!(
                "{} voxel stages but {} BEV stage widths",
                config.stages.len(),
                bev_widths.len()
            )));
        }
        let stem = Svfe::new(store, rng, "voxel.stage0", POINT_FEATURES, config.stem_channels);
        let mut scorers = Vec::new();
        let mut blocks = Vec::new();
        let mut to_bev = Vec::new();
        let mut prev = config.stem_channels;
        let mut d = depth;
        for (i, (st, &cb)) in config.stages.iter().zip(bev_widths).enumerate() {
            let s = i + 1;
            if d % st.depth != 0 {
                return Err(Error::Config(format!("voxel stage {s}: depth {d} not divisible by {}", st.depth)));
            }
            d /= st.depth;
            scorers.push(ScoreHead::new(store, rng, &format!("voxel.stage{s}.score"), prev));
            blocks.push(Svfe::new(store, rng, &format!("voxel.stage{s}"), prev + POINT_FEATURES, st.channels));
            to_bev.push(VoxelToBev::new(store, rng, &format!("voxel.stage{s}.bev"), st.channels * d, cb));
            prev = st.channels;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            scorers,
            blocks,
            to_bev,
        })
    }

    /// Runs every stage. `rng` drives re-voxelization subsampling.
    pub fn forward(&self, g: &mut Graph, voxels: &VoxelSet, rng: &mut impl Rng) -> Result<Vec<VoxelStageOutput>> {
        let mask = voxels.mask();
        let mask_t = g.constant(mask_tensor(voxels));
        let x = g.constant(voxels.features.clone());
        let mut feat = self.stem.forward(g, x, &mask, mask_t)?;
        let mut fine = voxels.clone();
        let mut fine_mask = mask;
        let mut outs = Vec::new();
        for (i, st) in self.config.stages.iter().enumerate() {
            let w = self.scorers[i].forward(g, feat, &fine_mask)?;
            let k_keep = keep_count(st.points, self.config.oversample, st.planar, fine.max_points);
            let rv = revoxelize(&fine, g.value(w).data(), st, k_keep, rng)?;
            let weighted = g.mul_bcast(feat, w)?;
            let picked = g.gather_points(weighted, &rv.index, rv.set.num_voxels(), st.points)?;
            let geo = g.constant(rv.set.features.clone());
            let x = g.concat(&[picked, geo], 0)?;
            let m = rv.set.mask();
            let mt = g.constant(mask_tensor(&rv.set));
            feat = self.blocks[i].forward(g, x, &m, mt)?;
            let dense = VoxelToBev::scatter(g, feat, &rv.set)?;
            let bev = self.to_bev[i].convs(g, dense)?;
            outs.push(VoxelStageOutput {
                dense,
                bev,
                set: rv.set.clone(),
            });
            fine = rv.set;
            fine_mask = m;
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Point, PointCloud};
    use crate::preprocess::{voxelize, VoxelSpec};
    use crate::rng;

    #[test]
    fn keep_count_matches_stage_one_example() {
        assert_eq!(keep_count(32, 2.0, 4, 12), 4);
        assert_eq!(keep_count(32, 2.0, 2, 32), 16);
        assert_eq!(keep_count(1, 0.01, 4, 12), 1);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_slots(&[0.2, 0.3, 0.3, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k_slots(&[0.25; 4], 3), vec![0, 1, 2]);
        assert_eq!(top_k_slots(&[0.5, 0.5], 4), vec![0, 1]);
    }

    fn tiny_set() -> VoxelSet {
        let spec = VoxelSpec {
            range: crate::geometry::RangeSpec {
                x_min: 0.0,
                x_max: 1.6,
                y_min: 0.0,
                y_max: 1.6,
                z_min: 0.0,
                z_max: 0.8,
            },
            voxel_size: [0.1, 0.1, 0.1],
            max_voxels: 100,
            max_points: 5,
        };
        let pts = (0..40)
            .map(|i| {
                let t = i as f64;
                Point::new((t * 0.037) % 1.6, (t * 0.053) % 1.6, (t * 0.011) % 0.8, 0.5)
            })
            .collect::<PointCloud>();
        voxelize(&pts, &spec, &mut rng::seeded(0))
    }

    #[test]
    fn revoxelize_keeps_a_sub_multiset() {
        let fine = tiny_set();
        let weights = vec![0.5; fine.num_voxels() * fine.max_points];
        let st = VoxelStage {
            planar: 4,
            depth: 4,
            points: 6,
            channels: 8,
        };
        let rv = revoxelize(&fine, &weights, &st, 2, &mut rng::seeded(1)).unwrap();
        assert_eq!(rv.set.dims, [2, 4, 4]);
        for (c, pts) in rv.set.points.iter().enumerate() {
            assert!(pts.len() <= 6);
            for (s, p) in pts.iter().enumerate() {
                let (v, n) = rv.index[c * 6 + s].unwrap();
                assert_eq!(fine.points[v][n], *p);
                let [z, y, x] = fine.coords[v];
                assert_eq!(rv.set.coords[c], [z / 4, y / 4, x / 4]);
            }
        }
        let total: usize = rv.set.counts.iter().sum();
        assert!(total <= fine.counts.iter().map(|&c| c.min(2)).sum());
    }

    #[test]
    fn single_point_pfw_is_identity() {
        let mut store = ParamStore::new();
        let pfw = Pfw::new(&mut store, &mut rng::seeded(0), "p", 4);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_fn(&[4, 1, 3], |i| if i % 3 == 0 { i as f64 + 1.0 } else { 0.0 }));
        let y = pfw.forward(&mut g, x, &[true, false, false]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn branch_runs_and_scatters_to_stage_grids() {
        let fine = tiny_set();
        let cfg = VoxelBranchConfig {
            stem_channels: 8,
            stages: vec![
                VoxelStage { planar: 2, depth: 2, points: 8, channels: 8 },
                VoxelStage { planar: 2, depth: 2, points: 8, channels: 8 },
            ],
            oversample: 2.0,
        };
        let mut store = ParamStore::new();
        let vb = VoxelBranch::new(&mut store, &mut rng::seeded(0), &cfg, 8, &[6, 6]).unwrap();
        let mut g = Graph::with_params(&store);
        let outs = vb.forward(&mut g, &fine, &mut rng::seeded(2)).unwrap();
        assert_eq!(g.shape(outs[0].dense), &[8 * 4, 8, 8]);
        assert_eq!(g.shape(outs[0].bev), &[6, 8, 8]);
        assert_eq!(g.shape(outs[1].dense), &[8 * 2, 4, 4]);
    }
}
