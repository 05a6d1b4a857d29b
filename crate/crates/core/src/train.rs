//! Training loop over in-memory frames with a line-oriented loss log.

use std::fmt;
use std::str::FromStr;

use crate::dataset::{FrameAnnotation, GtDatabase, PointCloud};
use crate::error::{Error, Result};
use crate::model::{Detector, Sample};
use crate::preprocess::{augment_scene, AugmentParams};
use crate::rng;
use crate::tensor::{Adam, Graph, ParamStore, Var};

pub const LOSS_LOG_HEADER: &str = "step loc cls dir total";

/// One row of the loss log. Values print in shortest round-trip form so
/// that logs compare bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub total: f64,
}

impl fmt::Display for StepLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?} {:?} {:?} {:?}", self.step, self.loc, self.cls, self.dir, self.total)
    }
}

impl FromStr for StepLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Invalid(format!("malformed loss log line `{s}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            loc: num(f[1])?,
            cls: num(f[2])?,
            dir: num(f[3])?,
            total: num(f[4])?,
        })
    }
}

/// Augmentation applied to each frame before it enters a step.
pub struct Augmentation<'a> {
    pub params: &'a AugmentParams,
    pub gtdb: Option<&'a GtDatabase>,
}

pub struct Trainer<'a> {
    pub detector: &'a Detector,
    pub adam: Adam,
    pub seed: u64,
    pub batch_size: usize,
    frames: &'a [(PointCloud, FrameAnnotation)],
    augment: Option<Augmentation<'a>>,
    cached: Vec<Sample>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        detector: &'a Detector,
        adam: Adam,
        frames: &'a [(PointCloud, FrameAnnotation)],
        augment: Option<Augmentation<'a>>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if frames.is_empty() || batch_size == 0 {
            return Err(Error::Invalid("training needs frames and a positive batch size".into()));
        }
        let cached = if augment.is_none() {
            frames
                .iter()
                .map(|(c, a)| detector.prepare(c, &mut rng::frame_voxelizer(seed, &a.frame_id)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            detector,
            adam,
            seed,
            batch_size,
            frames,
            augment,
            cached,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn sample(&self, i: usize) -> Result<(Sample, FrameAnnotation)> {
        let (cloud, ann) = &self.frames[i];
        match &self.augment {
            None => Ok((self.cached[i].clone(), ann.clone())),
            Some(a) => {
                let mut r = rng::derived(self.seed, &format!("augment/{}/{i}", self.step));
                let (c, an) = augment_scene(cloud, ann, a.gtdb, a.params, &mut r);
                Ok((self.detector.prepare(&c, &mut r), an))
            }
        }
    }

    /// Mean loss over one batch, then one optimizer update. Frames are
    /// visited cyclically. A non-finite loss aborts before the update.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepLoss> {
        let n = self.frames.len();
        let parts = {
            let mut g = Graph::with_params(store);
            let mut sums: Option<[Var; 4]> = None;
            for b in 0..self.batch_size {
                let i = (self.step * self.batch_size + b) % n;
                let (s, ann) = self.sample(i)?;
                let mut r = rng::derived(self.seed, &format!("revoxelize/{}/{b}", self.step));
                let l = self.detector.loss(&mut g, &s, &ann, &mut r)?;
                let cur = [l.loc, l.cls, l.dir, l.total];
                sums = Some(match sums {
                    None => cur,
                    Some(acc) => [
                        g.add(acc[0], cur[0])?,
                        g.add(acc[1], cur[1])?,
                        g.add(acc[2], cur[2])?,
                        g.add(acc[3], cur[3])?,
                    ],
                });
            }
            let k = 1.0 / self.batch_size as f64;
            let sums = sums.expect("batch is non-empty").map(|v| g.scale(v, k));
            let vals = sums.map(|v| g.value(v).item());
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!("loc {} cls {} dir {} total {}", vals[0], vals[1], vals[2], vals[3]),
                });
            }
            let grads = g.backward(sums[3])?;
            (vals, grads)
        };
        let (vals, grads) = parts;
        self.adam.step(store, &grads)?;
        let out = StepLoss {
            step: self.step,
            loc: vals[0],
            cls: vals[1],
            dir: vals[2],
            total: vals[3],
        };
        self.step += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_line_round_trips() {
        let l = StepLoss {
            step: 7,
            loc: 0.1 + 0.2,
            cls: 1e-300,
            dir: 0.0,
            total: 3.2,
        };
        let back: StepLoss = l.to_string().parse().unwrap();
        assert_eq!(back, l);
        assert!("1 2 3".parse::<StepLoss>().is_err());
    }
}
