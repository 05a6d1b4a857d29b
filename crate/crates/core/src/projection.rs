//! BEV-map backbone: five plain conv stages with per-stage fusion of the
//! voxel branch's BEV features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Conv2d, LayerNorm};
use crate::tensor::{Graph, ParamStore, Var};

/// Input downsampling of stages 0..=4: 4, 1, 2, 2, 2.
pub const STAGE_STRIDES: [[usize; 2]; 5] = [[2, 2], [1, 1], [2, 1], [2, 1], [2, 1]];

/// Total downsampling from the BEV grid to stage 4.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel widths of stages 0..=4.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256, 256],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 5 || self.widths.contains(&0) {
            return Err(Error::Config("backbone needs five positive stage widths".into()));
        }
        Ok(())
    }

    /// Output side length of stages 0..=4 for an `input` grid.
    pub fn resolutions(input: usize) -> Result<[usize; 5]> {
        if input == 0 || input % TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "BEV grid side {input} must be a positive multiple of {TOTAL_STRIDE}"
            )));
        }
        let mut r = input;
        let mut out = [0; 5];
        for (o, s) in out.iter_mut().zip(STAGE_STRIDES) {
            r /= s[0] * s[1];
            *o = r;
        }
        Ok(out)
    }
}

/// 3×3 conv → layer norm over channels → GeLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: LayerNorm,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3, stride),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        Ok(g.gelu(h))
    }
}

#[derive(Clone, Debug)]
pub struct BackboneStage {
    blocks: [ConvBlock; 2],
}

impl BackboneStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, strides: [usize; 2]) -> Self {
        Self {
            blocks: [
                ConvBlock::new(store, rng, &format!("{name}.b0"), cin, cout, strides[0]),
                ConvBlock::new(store, rng, &format!("{name}.b1"), cout, cout, strides[1]),
            ],
        }
    }

    pub fn blocks(&self) -> &[ConvBlock; 2] {
        &self.blocks
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.blocks[0].forward(g, x)?;
        self.blocks[1].forward(g, h)
    }
}

/// Channel concat → 1×1 → 3×3, back to the BEV width. No activation.
#[derive(Clone, Debug)]
pub struct FuseStage {
    pub reduce: Conv2d,
    pub mix: Conv2d,
    stage: usize,
}

impl FuseStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, stage: usize, c_bev: usize, c_voxel: usize) -> Self {
        let name = format!("proj.fuse{stage}");
        Self {
            reduce: Conv2d::new(store, rng, &format!("{name}.reduce"), c_bev + c_voxel, c_bev, 1, 1),
            mix: Conv2d::new(store, rng, &format!("{name}.mix"), c_bev, c_bev, 3, 1),
            stage,
        }
    }

    pub fn forward(&self, g: &mut Graph, bev: Var, voxel: Var) -> Result<Var> {
        let (a, b) = (g.shape(bev), g.shape(voxel));
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
            return Err(Error::shape(
                "fuse_stage",
                format!("stage {}: BEV {a:?} vs voxel {b:?}", self.stage),
            ));
        }
        let cat = g.concat(&[bev, voxel], 0)?;
        let h = self.reduce.forward(g, cat)?;
        self.mix.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionBranch {
    pub config: BackboneConfig,
    stages: Vec<BackboneStage>,
    fuse: Vec<FuseStage>,
}

impl ProjectionBranch {
    /// `voxel_widths` are the voxel BEV widths of stages 1..=4.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &BackboneConfig, in_channels: usize, voxel_widths: &[usize]) -> Result<Self> {
        config.validate()?;
        if voxel_widths.len() != 4 {
            return Err(Error::Config("projection fusion needs four voxel stage widths".into()));
        }
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (s, (&w, strides)) in config.widths.iter().zip(STAGE_STRIDES).enumerate() {
            stages.push(BackboneStage::new(store, rng, &format!("proj.stage{s}"), cin, w, strides));
            cin = w;
        }
        let fuse = (1..5)
            .map(|s| FuseStage::new(store, rng, s, config.widths[s], voxel_widths[s - 1]))
            .collect();
        Ok(Self {
            config: config.clone(),
            stages,
            fuse,
        })
    }

    pub fn stage(&self, s: usize) -> &BackboneStage {
        &self.stages[s]
    }

    pub fn fuse(&self, s: usize) -> &FuseStage {
        &self.fuse[s - 1]
    }

    /// Post-fusion features of stages 1..=4. Stage 0 is not fused.
    pub fn forward(&self, g: &mut Graph, bev: Var, voxel_bev: &[Var]) -> Result<Vec<Var>> {
        if voxel_bev.len() != 4 {
            return Err(Error::Invalid(format!("expected 4 voxel BEV maps, got {}", voxel_bev.len())));
        }
        let mut x = self.stages[0].forward(g, bev)?;
        let mut outs = Vec::with_capacity(4);
        for s in 1..5 {
            x = self.stages[s].forward(g, x)?;
            x = self.fuse[s - 1].forward(g, x, voxel_bev[s - 1])?;
            outs.push(x);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::nn::set_identity_kernel;
    use crate::tensor::Tensor;

    #[test]
    fn resolution_ladder() {
        assert_eq!(BackboneConfig::resolutions(608).unwrap(), [152, 152, 76, 38, 19]);
        assert_eq!(BackboneConfig::resolutions(64).unwrap(), [16, 16, 8, 4, 2]);
        assert!(BackboneConfig::resolutions(76).is_err());
    }

    #[test]
    fn zero_voxel_branch_with_identity_fusion_passes_bev_through() {
        let mut store = ParamStore::new();
        let f = FuseStage::new(&mut store, &mut rng::seeded(0), 1, 3, 2);
        set_identity_kernel(&mut store, &f.reduce, 3);
        set_identity_kernel(&mut store, &f.mix, 3);
        let mut g = Graph::with_params(&store);
        let bev = g.constant(Tensor::from_fn(&[3, 4, 4], |i| (i as f64).sin()));
        let vox = g.constant(Tensor::zeros(&[2, 4, 4]));
        let y = f.forward(&mut g, bev, vox).unwrap();
        assert_eq!(g.value(y), g.value(bev));
    }

    #[test]
    fn mismatched_fusion_names_the_stage() {
        let mut store = ParamStore::new();
        let f = FuseStage::new(&mut store, &mut rng::seeded(0), 3, 3, 2);
        let mut g = Graph::with_params(&store);
        let bev = g.constant(Tensor::zeros(&[3, 4, 4]));
        let vox = g.constant(Tensor::zeros(&[2, 2, 2]));
        let err = f.forward(&mut g, bev, vox).unwrap_err().to_string();
        assert!(err.contains("stage 3"), "{err}");
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::new();
        let st = BackboneStage::new(&mut store, &mut rng::seeded(0), "s", 3, 4, [2, 1]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[3, 8, 8]));
        let y = st.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 4]);
        assert_eq!(g.value(y).max_abs(), 0.0);
    }
}
