//! Single-shot detection head: anchors, target assignment, losses and
//! decoding into detections.

mod anchors;

pub use anchors::{
    decode_box, encode_box, generate_anchors, match_anchors, AnchorClass, AnchorGrid, AnchorLabel, ANCHOR_YAWS,
    BOX_CODE, YAW_INDEX,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, LabeledObject};
use crate::error::{Error, Result};
use crate::geometry::nms_bev;
use crate::tensor::sigmoid;
use crate::tensor::nn::Conv2d;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Prior foreground probability used to initialise the class bias.
pub const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 2.0,
            cls: 1.0,
            dir: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn total(&self, loc: f64, cls: f64, dir: f64) -> f64 {
        self.loc * loc + self.cls * cls + self.dir * dir
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub anchors: Vec<AnchorClass>,
    pub loss: LossWeights,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates per class entering NMS.
    pub pre_nms: usize,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            anchors: vec![AnchorClass::car(), AnchorClass::cyclist()],
            loss: LossWeights::default(),
            score_threshold: 0.3,
            nms_iou: 0.1,
            pre_nms: 1000,
            max_detections: 100,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::Config("head needs at least one anchor class".into()));
        }
        for a in &self.anchors {
            a.validate()?;
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config("head thresholds outside their ranges".into()));
        }
        Ok(())
    }
}

/// 1×1 convolutions for class logits `(A, H, W)`, box residuals
/// `(7A, H, W)` and direction logits `(A, H, W)`.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub dir: Conv2d,
    pub anchors_per_cell: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub reg: Var,
    pub dir: Var,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, width: usize, classes: usize) -> Self {
        let a = classes * ANCHOR_YAWS.len();
        let cls = Conv2d::new(store, rng, "head.cls", width, a, 1, 1);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store.insert("head.cls.bias", Tensor::full(&[a], prior));
        Self {
            cls,
            reg: Conv2d::new(store, rng, "head.reg", width, a * BOX_CODE, 1, 1),
            dir: Conv2d::new(store, rng, "head.dir", width, a, 1, 1),
            anchors_per_cell: a,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<HeadOutput> {
        Ok(HeadOutput {
            cls: self.cls.forward(g, x)?,
            reg: self.reg.forward(g, x)?,
            dir: self.dir.forward(g, x)?,
        })
    }
}

/// Dense training targets laid out like [`HeadOutput`]. Weights already
/// carry the `1 / N_pos` normalisation (`1 / max(N_pos, 1)` for classes).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    pub cls_labels: Tensor,
    pub cls_weights: Tensor,
    pub box_targets: Tensor,
    pub box_weights: Tensor,
    pub dir_targets: Tensor,
    pub dir_weights: Tensor,
    pub num_pos: usize,
}

pub fn build_targets(anchors: &AnchorGrid, gts: &[LabeledObject]) -> Result<HeadTargets> {
    let targets: Vec<LabeledObject> = gts.iter().filter(|o| !o.is_ignorable()).cloned().collect();
    let labels = match_anchors(anchors, &targets);
    let (a, h, w) = (anchors.per_cell(), anchors.height, anchors.width);
    let plane = h * w;
    let num_pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
    let cls_norm = 1.0 / num_pos.max(1) as f64;
    let pos_norm = if num_pos == 0 { 0.0 } else { 1.0 / num_pos as f64 };
    let mut cls_labels = vec![0.0; a * plane];
    let mut cls_weights = vec![0.0; a * plane];
    let mut box_targets = vec![0.0; a * BOX_CODE * plane];
    let mut box_weights = vec![0.0; a * plane];
    let mut dir_targets = vec![0.0; a * plane];
    let mut dir_weights = vec![0.0; a * plane];
    for (i, l) in labels.iter().enumerate() {
        match *l {
            AnchorLabel::Positive(j) => {
                let (r, dir) = encode_box(&anchors.boxes[i], &targets[j].bbox)?;
                cls_labels[i] = 1.0;
                cls_weights[i] = cls_norm;
                box_weights[i] = pos_norm;
                dir_weights[i] = pos_norm;
                dir_targets[i] = if dir { 1.0 } else { 0.0 };
                let (ai, cell) = (i / plane, i % plane);
                for (k, v) in r.into_iter().enumerate() {
                    box_targets[(ai * BOX_CODE + k) * plane + cell] = v;
                }
            }
            AnchorLabel::Negative => cls_weights[i] = cls_norm,
            AnchorLabel::Ignore => {}
        }
    }
    let t = |shape: &[usize], d: Vec<f64>| Tensor::new(shape, d).expect("target shape");
    Ok(HeadTargets {
        cls_labels: t(&[a, h, w], cls_labels),
        cls_weights: t(&[a, h, w], cls_weights),
        box_targets: t(&[a * BOX_CODE, h, w], box_targets),
        box_weights: t(&[a, h, w], box_weights),
        dir_targets: t(&[a, h, w], dir_targets),
        dir_weights: t(&[a, h, w], dir_weights),
        num_pos,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loc: Var,
    pub cls: Var,
    pub dir: Var,
    pub total: Var,
}

/// `β_loc · L_loc + β_cls · L_cls + β_dir · L_dir` with each part already
/// normalised through the target weights.
pub fn head_loss(g: &mut Graph, out: &HeadOutput, t: &HeadTargets, w: &LossWeights) -> Result<LossVars> {
    let loc = g.box_regression_loss(out.reg, &t.box_targets, &t.box_weights, BOX_CODE, Some(YAW_INDEX))?;
    let cls = g.focal_loss(out.cls, &t.cls_labels, &t.cls_weights, w.focal_alpha, w.focal_gamma)?;
    let dir = g.bce_loss(out.dir, &t.dir_targets, &t.dir_weights)?;
    let a = g.scale(loc, w.loc);
    let b = g.scale(cls, w.cls);
    let c = g.scale(dir, w.dir);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { loc, cls, dir, total })
}

/// Thresholds sigmoid scores, decodes boxes with their direction bits and
/// runs per-class BEV NMS. Detections are sorted by descending score.
pub fn predict(cls: &Tensor, reg: &Tensor, dir: &Tensor, anchors: &AnchorGrid, cfg: &HeadConfig) -> Result<Vec<Detection>> {
    let n = anchors.len();
    let plane = anchors.plane();
    if cls.numel() != n || dir.numel() != n || reg.numel() != n * BOX_CODE {
        return Err(Error::shape(
            "predict",
            format!("{n} anchors vs cls {:?}, reg {:?}, dir {:?}", cls.shape(), reg.shape(), dir.shape()),
        ));
    }
    let mut out = Vec::new();
    for (ci, ac) in anchors.classes.iter().enumerate() {
        let per_class = plane * ANCHOR_YAWS.len();
        let mut cand: Vec<(usize, f64)> = (ci * per_class..(ci + 1) * per_class)
            .map(|i| (i, sigmoid(cls.data()[i])))
            .filter(|&(_, s)| s >= cfg.score_threshold)
            .collect();
        cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        cand.truncate(cfg.pre_nms);
        let boxes: Vec<_> = cand
            .iter()
            .map(|&(i, _)| {
                let (ai, cell) = (i / plane, i % plane);
                let mut r = [0.0; BOX_CODE];
                for (k, v) in r.iter_mut().enumerate() {
                    *v = reg.data()[(ai * BOX_CODE + k) * plane + cell];
                }
                decode_box(&anchors.boxes[i], &r, dir.data()[i] >= 0.0)
            })
            .collect();
        let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
        for k in nms_bev(&boxes, &scores, cfg.nms_iou)? {
            out.push(Detection {
                class: ac.class.clone(),
                bbox: boxes[k],
                score: scores[k],
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ObjectClass;
    use crate::geometry::{Box3D, RangeSpec};

    fn grid() -> AnchorGrid {
        let r = RangeSpec {
            x_min: 0.0,
            x_max: 16.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: -3.0,
            z_max: 1.0,
        };
        generate_anchors(&r, 8, 8, &[AnchorClass::car(), AnchorClass::cyclist()])
    }

    fn car_at(x: f64, y: f64) -> LabeledObject {
        LabeledObject {
            class: ObjectClass::Car,
            bbox: Box3D::new([x, y, -1.0], [1.6, 3.9, 1.56], 0.0).unwrap(),
            occlusion: 0,
            truncation: 0.0,
            bbox_height: 50.0,
        }
    }

    #[test]
    fn exact_anchor_is_positive() {
        let g = grid();
        let gt = car_at(g.boxes[9].x, g.boxes[9].y);
        let t = build_targets(&g, &[gt]).unwrap();
        assert!(t.num_pos >= 1);
        assert_eq!(t.cls_labels.data()[9], 1.0);
        let box_sum: f64 = t.box_weights.data().iter().sum();
        assert!((box_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_has_only_class_loss() {
        let mut store = ParamStore::new();
        let head = DetectionHead::new(&mut store, &mut crate::rng::seeded(0), 4, 2);
        let g0 = grid();
        let t = build_targets(&g0, &[]).unwrap();
        assert_eq!(t.num_pos, 0);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_fn(&[4, 8, 8], |i| (i as f64).sin()));
        let out = head.forward(&mut g, x).unwrap();
        let l = head_loss(&mut g, &out, &t, &LossWeights::default()).unwrap();
        assert_eq!(g.value(l.loc).item(), 0.0);
        assert_eq!(g.value(l.dir).item(), 0.0);
        assert!(g.value(l.cls).item() > 0.0);
    }

    #[test]
    fn dominant_anchor_gives_one_detection() {
        let g = grid();
        let n = g.len();
        let mut cls = Tensor::full(&[4, 8, 8], -50.0);
        cls.data_mut()[10] = 5.0;
        let reg = Tensor::zeros(&[28, 8, 8]);
        let dir = Tensor::full(&[4, 8, 8], 1.0);
        let d = predict(&cls, &reg, &dir, &g, &HeadConfig::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, g.boxes[10]);
        assert_eq!(d[0].class, ObjectClass::Car);
        let none = predict(&Tensor::full(&[4, 8, 8], f64::NEG_INFINITY), &reg, &dir, &g, &HeadConfig::default());
        assert!(none.unwrap().is_empty());
        assert_eq!(n, 256);
    }
}
