//! Multi-scale neck: per-stage fusion of voxel and BEV features on a
//! doubled canvas, alignment to the stage-1 resolution, and attention
//! weighting across stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Conv2d, Upsample2x};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    /// Channel width of the fused output map.
    pub width: usize,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self { width: 256 }
    }
}

/// Voxel map 1×1 to the BEV width, interleaved with the BEV map onto a
/// `(C, 2H, 2W)` canvas, then 3×3 and 1×1 convolutions.
///
/// In every 2×2 block the top row holds the voxel value and the bottom row
/// the BEV value, so each 3×3 window sees both.
#[derive(Clone, Debug)]
pub struct MspFusion {
    pub project: Conv2d,
    pub mix: Conv2d,
    pub point: Conv2d,
}

impl MspFusion {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_voxel: usize, c_bev: usize) -> Self {
        Self {
            project: Conv2d::new(store, rng, &format!("{name}.project"), c_voxel, c_bev, 1, 1),
            mix: Conv2d::new(store, rng, &format!("{name}.mix"), c_bev, c_bev, 3, 1),
            point: Conv2d::new(store, rng, &format!("{name}.point"), c_bev, c_bev, 1, 1),
        }
    }

    /// Canvas before the two convolutions.
    pub fn canvas(&self, g: &mut Graph, voxel: Var, bev: Var) -> Result<Var> {
        let (a, b) = (g.shape(voxel), g.shape(bev));
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
            return Err(Error::shape("msp_fusion", format!("voxel {a:?} vs BEV {b:?}")));
        }
        let v = self.project.forward(g, voxel)?;
        g.interleave2x2(v, bev)
    }

    pub fn forward(&self, g: &mut Graph, voxel: Var, bev: Var) -> Result<Var> {
        let c = self.canvas(g, voxel, bev)?;
        let h = self.mix.forward(g, c)?;
        self.point.forward(g, h)
    }
}

/// Brings one canvas to the target resolution with stride-2 convolutions
/// or (3×3 conv, 2× deconv) pairs, then 1×1 to the neck width.
#[derive(Clone, Debug)]
pub struct AlignStage {
    down: Vec<Conv2d>,
    up: Vec<(Conv2d, Upsample2x)>,
    out: Conv2d,
}

impl AlignStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        from: usize,
        to: usize,
        width: usize,
    ) -> Result<Self> {
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut r = from;
        while r > to {
            if r % 2 != 0 {
                return Err(Error::Config(format!("{name}: cannot reduce {from} to {to} by halving")));
            }
            down.push(Conv2d::new(store, rng, &format!("{name}.down{}", down.len()), channels, channels, 3, 2));
            r /= 2;
        }
        while r < to {
            let i = up.len();
            up.push((
                Conv2d::new(store, rng, &format!("{name}.up{i}.conv"), channels, channels, 3, 1),
                Upsample2x::new(store, rng, &format!("{name}.up{i}.deconv"), channels, channels),
            ));
            r *= 2;
        }
        if r != to {
            return Err(Error::Config(format!("{name}: resolution {from} cannot reach {to}")));
        }
        Ok(Self {
            down,
            up,
            out: Conv2d::new(store, rng, &format!("{name}.out"), channels, width, 1, 1),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.down {
            h = c.forward(g, h)?;
        }
        for (c, u) in &self.up {
            h = c.forward(g, h)?;
            h = u.forward(g, h)?;
        }
        self.out.forward(g, h)
    }
}

/// One 3×3 conv per source to a single logit channel, softmax across
/// sources per location, weighted sum.
#[derive(Clone, Debug)]
pub struct AttentionFuse {
    pub heads: Vec<Conv2d>,
}

impl AttentionFuse {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, sources: usize, width: usize) -> Self {
        Self {
            heads: (0..sources)
                .map(|i| Conv2d::new(store, rng, &format!("{name}.head{i}"), width, 1, 3, 1))
                .collect(),
        }
    }

    /// Per-location source weights `(k, H, W)`.
    pub fn weights(&self, g: &mut Graph, sources: &[Var]) -> Result<Var> {
        if sources.len() != self.heads.len() || sources.len() < 2 {
            return Err(Error::Invalid(format!(
                "attention over {} sources with {} heads",
                sources.len(),
                self.heads.len()
            )));
        }
        let logits = sources
            .iter()
            .zip(&self.heads)
            .map(|(&s, h)| h.forward(g, s))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&logits, 0)?;
        g.softmax(cat, 0)
    }

    pub fn forward(&self, g: &mut Graph, sources: &[Var]) -> Result<Var> {
        let w = self.weights(g, sources)?;
        let mut acc: Option<Var> = None;
        for (i, &s) in sources.iter().enumerate() {
            let wi = g.slice(w, 0, i, 1)?;
            let term = g.mul_bcast(s, wi)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least two sources"))
    }
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub config: NeckConfig,
    msp: Vec<MspFusion>,
    align: Vec<AlignStage>,
    pub attention: AttentionFuse,
}

impl Neck {
    /// Per stage: dense voxel channels, BEV channels and side length. The
    /// output resolution is that of the first stage.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &NeckConfig,
        voxel_channels: &[usize],
        bev_channels: &[usize],
        resolutions: &[usize],
    ) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("neck width must be positive".into()));
        }
        let k = resolutions.len();
        if k < 2 || voxel_channels.len() != k || bev_channels.len() != k {
            return Err(Error::Config("neck needs at least two consistently described stages".into()));
        }
        let target = resolutions[0];
        let mut msp = Vec::new();
        let mut align = Vec::new();
        for i in 0..k {
            let name = format!("neck.stage{}", i + 1);
            msp.push(MspFusion::new(store, rng, &format!("{name}.msp"), voxel_channels[i], bev_channels[i]));
            align.push(AlignStage::new(
                store,
                rng,
                &format!("{name}.align"),
                bev_channels[i],
                2 * resolutions[i],
                target,
                config.width,
            )?);
        }
        let attention = AttentionFuse::new(store, rng, "neck.attention", k, config.width);
        Ok(Self {
            config: config.clone(),
            msp,
            align,
            attention,
        })
    }

    pub fn forward(&self, g: &mut Graph, voxel: &[Var], bev: &[Var]) -> Result<Var> {
        if voxel.len() != self.msp.len() || bev.len() != self.msp.len() {
            return Err(Error::Invalid(format!(
                "neck expects {} stages, got {} voxel and {} BEV maps",
                self.msp.len(),
                voxel.len(),
                bev.len()
            )));
        }
        let mut aligned = Vec::with_capacity(voxel.len());
        for i in 0..voxel.len() {
            let c = self.msp[i].forward(g, voxel[i], bev[i])?;
            aligned.push(self.align[i].forward(g, c)?);
        }
        self.attention.forward(g, &aligned)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::nn::set_identity_kernel;
    use crate::tensor::Tensor;

    #[test]
    fn constant_inputs_give_constant_canvas() {
        let mut store = ParamStore::new();
        let m = MspFusion::new(&mut store, &mut rng::seeded(0), "m", 2, 2);
        set_identity_kernel(&mut store, &m.project, 2);
        let mut g = Graph::with_params(&store);
        let v = g.constant(Tensor::full(&[2, 3, 3], 1.5));
        let b = g.constant(Tensor::full(&[2, 3, 3], 1.5));
        let c = m.canvas(&mut g, v, b).unwrap();
        assert_eq!(g.shape(c), &[2, 6, 6]);
        assert!(g.value(c).data().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn align_paths() {
        let mut store = ParamStore::new();
        let r = &mut rng::seeded(0);
        let down = AlignStage::new(&mut store, r, "a", 2, 16, 8, 3).unwrap();
        let same = AlignStage::new(&mut store, r, "b", 2, 8, 8, 3).unwrap();
        let up = AlignStage::new(&mut store, r, "c", 2, 2, 8, 3).unwrap();
        assert_eq!((down.down.len(), down.up.len()), (1, 0));
        assert_eq!((same.down.len(), same.up.len()), (0, 0));
        assert_eq!((up.down.len(), up.up.len()), (0, 2));
        assert!(AlignStage::new(&mut store, r, "d", 2, 12, 8, 3).is_err());
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::full(&[2, 2, 2], 0.3));
        let y = up.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[3, 8, 8]);
    }

    #[test]
    fn identical_sources_pass_through_attention() {
        let mut store = ParamStore::new();
        let a = AttentionFuse::new(&mut store, &mut rng::seeded(4), "att", 2, 3);
        let mut g = Graph::with_params(&store);
        let t = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).cos());
        let s0 = g.constant(t.clone());
        let s1 = g.constant(t.clone());
        let w = a.weights(&mut g, &[s0, s1]).unwrap();
        let wv = g.value(w).data().to_vec();
        for i in 0..16 {
            assert!((wv[i] + wv[16 + i] - 1.0).abs() < 1e-12);
        }
        // Heads differ, so weights differ, but the sources are identical.
        let y = a.forward(&mut g, &[s0, s1]).unwrap();
        for (p, q) in g.value(y).data().iter().zip(t.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
