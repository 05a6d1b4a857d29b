//! TOML run configuration. Every table rejects unknown keys and missing
//! keys fall back to the defaults below.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! source = "kitti"        # or "synthetic"
//! root = "data/kitti"
//! train_split = "train"
//! val_split = "val"
//! cache_dir = "cache"
//! gtdb_dir = "gtdb"
//!
//! [grid]                  # BEV raster
//! cell = [0.1, 0.1]
//! [grid.range]
//! x_min = 0.0
//! # ...
//!
//! [voxelizer]             # voxel_size, max_voxels, max_points, range
//! [augment]               # samples_per_class, rotation, translation, scale, flip_prob
//! [model.voxel]           # stem_channels, oversample, [[model.voxel.stages]]
//! [model.backbone]        # widths
//! [model.neck]            # width
//! [model.head]            # anchors, loss, score_threshold, nms_iou, ...
//! [optimizer]             # lr, weight_decay, momentum, beta2, eps, schedule
//! [train]                 # epochs, max_steps, batch_size, checkpoint_every, augment
//! [synthetic]             # scene generator, used when data.source = "synthetic"
//! [eval]                  # iou per class, recall_points, difficulty rules
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::preprocess::{AugmentParams, GridSpec, VoxelSpec};
use crate::presets;
use crate::synthetic::SceneConfig;
use crate::tensor::{AdamConfig, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Kitti,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// KITTI `training/` layout root.
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub cache_dir: PathBuf,
    pub gtdb_dir: PathBuf,
    /// Scenes generated when the source is synthetic.
    pub synthetic_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Kitti,
            root: PathBuf::from("data/kitti"),
            train_split: "train".into(),
            val_split: "val".into(),
            cache_dir: PathBuf::from("cache"),
            gtdb_dir: PathBuf::from("gtdb"),
            synthetic_frames: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    OneCycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Adam first-moment decay.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleKind,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 0.01,
            momentum: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            schedule: ScheduleKind::OneCycle,
            pct_start: 0.4,
            div_factor: 10.0,
            final_div_factor: 1e4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.pct_start)
            && self.div_factor > 0.0
            && self.final_div_factor > 0.0;
        if !ok {
            return Err(Error::Config("optimizer values out of range".into()));
        }
        Ok(())
    }

    pub fn adam(&self, total_steps: usize) -> AdamConfig {
        let schedule = match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::OneCycle => LrSchedule::OneCycle {
                total_steps,
                pct_start: self.pct_start,
                div_factor: self.div_factor,
                final_div_factor: self.final_div_factor,
            },
        };
        AdamConfig {
            lr: self.lr,
            beta1: self.momentum,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Zero disables periodic checkpoints; initial and final ones are
    /// always written.
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            max_steps: None,
            batch_size: 2,
            checkpoint_every: 1000,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, frames: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * frames.div_ceil(self.batch_size.max(1)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub grid: GridSpec,
    pub voxelizer: VoxelSpec,
    pub augment: AugmentParams,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub synthetic: SceneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            grid: GridSpec::KITTI,
            voxelizer: VoxelSpec::KITTI,
            augment: AugmentParams::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            synthetic: SceneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Toy-width model on 25.6 m synthetic scenes without augmentation,
    /// 500 steps with the default optimizer.
    pub fn toy() -> Self {
        let (grid, voxelizer, synthetic) = presets::toy_grids();
        Self {
            data: DataConfig {
                source: DataSource::Synthetic,
                ..DataConfig::default()
            },
            grid,
            voxelizer,
            model: ModelConfig::toy(),
            train: TrainConfig {
                max_steps: Some(500),
                checkpoint_every: 100,
                augment: false,
                ..TrainConfig::default()
            },
            synthetic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.voxelizer.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.synthetic.validate()?;
        self.eval.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Hex digest of everything that shapes preprocessed inputs.
    pub fn preprocess_key(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            grid: &'a GridSpec,
            voxelizer: &'a VoxelSpec,
        }
        let text = toml::to_string(&Key {
            seed: self.seed,
            grid: &self.grid,
            voxelizer: &self.voxelizer,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nlearning_rate = 0.1").is_err());
        assert_eq!(RunConfig::from_toml("seed = 3").unwrap().seed, 3);
    }

    #[test]
    fn default_optimizer_is_one_cycle_adam() {
        let a = RunConfig::default().optimizer.adam(100);
        assert_eq!((a.lr, a.weight_decay, a.beta1), (0.003, 0.01, 0.9));
        assert!(matches!(a.schedule, LrSchedule::OneCycle { total_steps: 100, .. }));
    }

    #[test]
    fn key_tracks_inputs_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 3;
        assert_eq!(a.preprocess_key().unwrap(), b.preprocess_key().unwrap());
        b.seed = 1;
        assert_ne!(a.preprocess_key().unwrap(), b.preprocess_key().unwrap());
    }
}
