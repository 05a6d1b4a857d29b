//! KITTI-style evaluation: difficulty buckets and AP over 40 recall points,
//! in BEV or 3D.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, FrameAnnotation, LabeledObject, ObjectClass};
use crate::error::{Error, Result};
use crate::geometry::{bev_intersection, bev_iou, iou_3d, Box3D};

pub const METRICS_TABLE_FILE: &str = "metrics.txt";
pub const METRICS_KV_FILE: &str = "metrics.kv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl EvalMode {
    pub const ALL: [EvalMode; 2] = [EvalMode::Bev, EvalMode::ThreeD];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Bev => "bev",
            EvalMode::ThreeD => "3d",
        }
    }

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            EvalMode::Bev => bev_iou(a, b),
            EvalMode::ThreeD => iou_3d(a, b),
        }
    }
}

/// Admission limits of one difficulty level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRule {
    pub min_height: f64,
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Matching threshold per class.
    pub iou: BTreeMap<ObjectClass, f64>,
    pub recall_points: usize,
    /// Easy, moderate and hard, in that order.
    pub rules: [DifficultyRule; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou: BTreeMap::from([(ObjectClass::Car, 0.7), (ObjectClass::Cyclist, 0.5)]),
            recall_points: 40,
            rules: [
                DifficultyRule {
                    min_height: 40.0,
                    max_occlusion: 0,
                    max_truncation: 0.15,
                },
                DifficultyRule {
                    min_height: 25.0,
                    max_occlusion: 1,
                    max_truncation: 0.30,
                },
                DifficultyRule {
                    min_height: 25.0,
                    max_occlusion: 2,
                    max_truncation: 0.50,
                },
            ],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou.values().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("evaluation IoU thresholds must lie in (0, 1]".into()));
        }
        if self.recall_points == 0 {
            return Err(Error::Config("recall_points must be positive".into()));
        }
        Ok(())
    }

    pub fn threshold(&self, class: &ObjectClass) -> Result<f64> {
        self.iou
            .get(class)
            .copied()
            .ok_or_else(|| Error::Config(format!("no evaluation threshold for class {class}")))
    }

    /// `1/R, 2/R, …, 1`.
    pub fn recall_grid(&self) -> Vec<f64> {
        (1..=self.recall_points).map(|i| i as f64 / self.recall_points as f64).collect()
    }
}

/// Easiest level whose limits the object meets; `None` when it meets none.
pub fn difficulty_bucket(obj: &LabeledObject, rules: &[DifficultyRule; 3]) -> Option<Difficulty> {
    if !obj.bbox_height.is_finite() || !obj.truncation.is_finite() {
        warn!("object {} lacks image height or truncation; ignored", obj.class);
        return None;
    }
    Difficulty::ALL.into_iter().zip(rules).find_map(|(d, r)| {
        (obj.bbox_height >= r.min_height && obj.occlusion <= r.max_occlusion && obj.truncation <= r.max_truncation)
            .then_some(d)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GtRole {
    Counted,
    Ignored,
}

/// Scored detections marked true or false positive, ignored ones dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchOutcome {
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy matching of one frame. Detections are visited by descending
/// score (ties by index) and take the unmatched ground truth of highest IoU
/// at or above `threshold`. Hits on ignored ground truth, and misses that
/// overlap a DontCare region, are dropped.
pub fn match_frame(
    dets: &[Detection],
    gt: &FrameAnnotation,
    class: &ObjectClass,
    difficulty: Difficulty,
    cfg: &EvalConfig,
    mode: EvalMode,
) -> Result<MatchOutcome> {
    let threshold = cfg.threshold(class)?;
    let dont_care = ObjectClass::Other("DontCare".into());
    let mut gts: Vec<(&Box3D, GtRole)> = Vec::new();
    let mut regions: Vec<&Box3D> = Vec::new();
    for o in &gt.objects {
        if o.class == *class {
            let role = match difficulty_bucket(o, &cfg.rules) {
                Some(d) if d <= difficulty => GtRole::Counted,
                _ => GtRole::Ignored,
            };
            gts.push((&o.bbox, role));
        } else if o.class == dont_care {
            regions.push(&o.bbox);
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == *class).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = MatchOutcome {
        scored: Vec::new(),
        num_gt: gts.iter().filter(|g| g.1 == GtRole::Counted).count(),
    };
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (b, _)) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = mode.iou(&d.bbox, b);
            if iou >= threshold && best.is_none_or(|(_, v)| iou > v) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                if gts[j].1 == GtRole::Counted {
                    out.scored.push((d.score, true));
                }
            }
            None => {
                if !regions.iter().any(|r| bev_intersection(&d.bbox, r) > 0.0) {
                    out.scored.push((d.score, false));
                }
            }
        }
    }
    Ok(out)
}

/// Interpolated AP from pooled outcomes; `None` without ground truth.
pub fn ap_from_matches(outcomes: &[MatchOutcome], recall_grid: &[f64]) -> Option<f64> {
    let num_gt: usize = outcomes.iter().map(|o| o.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> = outcomes.iter().flat_map(|o| o.scored.iter().copied()).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(all.len());
    for (k, &(_, hit)) in all.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Running maximum of precision from the tail gives the interpolation.
    let mut best = 0.0f64;
    for p in curve.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let sum: f64 = recall_grid
        .iter()
        .map(|&r| curve.iter().find(|&&(rec, _)| rec >= r).map_or(0.0, |&(_, p)| p))
        .sum();
    Some(sum / recall_grid.len() as f64)
}

/// AP of `class` at `difficulty`; `None` when that bucket holds no
/// ground truth. `dets[i]` belongs to `gts[i]`.
pub fn compute_ap_r40(
    dets: &[Vec<Detection>],
    gts: &[FrameAnnotation],
    cfg: &EvalConfig,
    class: &ObjectClass,
    difficulty: Difficulty,
    mode: EvalMode,
) -> Result<Option<f64>> {
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} detection frames for {} annotated frames",
            dets.len(),
            gts.len()
        )));
    }
    let outcomes = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| match_frame(d, g, class, difficulty, cfg, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(ap_from_matches(&outcomes, &cfg.recall_grid()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApEntry {
    pub class: ObjectClass,
    pub mode: EvalMode,
    pub difficulty: Difficulty,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<ApEntry>,
}

impl EvalReport {
    pub fn get(&self, class: &ObjectClass, mode: EvalMode, difficulty: Difficulty) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.class == *class && e.mode == mode && e.difficulty == difficulty)
            .and_then(|e| e.ap)
    }

    /// `ap.<mode>.<class>.<difficulty>=<value>` per line, `absent` when
    /// undefined. Values are percentages.
    pub fn to_key_values(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let v = e.ap.map_or("absent".to_string(), |a| format!("{:.4}", 100.0 * a));
                format!(
                    "ap.{}.{}.{}={v}\n",
                    e.mode.as_str(),
                    e.class.as_str().to_lowercase(),
                    e.difficulty.as_str()
                )
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let t = dir.join(METRICS_TABLE_FILE);
        fs::write(&t, self.to_string()).map_err(|e| Error::io(&t, e))?;
        let k = dir.join(METRICS_KV_FILE);
        fs::write(&k, self.to_key_values()).map_err(|e| Error::io(&k, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<4} {:>9} {:>9} {:>9}", "class", "mode", "easy", "moderate", "hard")?;
        let mut rows: Vec<(&ObjectClass, EvalMode)> = Vec::new();
        for e in &self.entries {
            if !rows.contains(&(&e.class, e.mode)) {
                rows.push((&e.class, e.mode));
            }
        }
        for (class, mode) in rows {
            write!(f, "{:<10} {:<4}", class.as_str(), mode.as_str())?;
            for d in Difficulty::ALL {
                match self.get(class, mode, d) {
                    Some(a) => write!(f, " {:>9.2}", 100.0 * a)?,
                    None => write!(f, " {:>9}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// AP for every configured class, both modes and all difficulties.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[FrameAnnotation], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for class in cfg.iou.keys() {
        for mode in EvalMode::ALL {
            for difficulty in Difficulty::ALL {
                entries.push(ApEntry {
                    class: class.clone(),
                    mode,
                    difficulty,
                    ap: compute_ap_r40(dets, gts, cfg, class, difficulty, mode)?,
                });
            }
        }
    }
    Ok(EvalReport { entries })
}
