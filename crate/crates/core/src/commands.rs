//! Implementations behind the `pointfuse` subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::cache;
use crate::checks::{self, BlockCheck};
use crate::config::{DataSource, RunConfig};
use crate::dataset::{build_gt_database, write_kitti_results, Calibration, FrameAnnotation, GtDatabase, KittiDataset, PointCloud};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{Detector, Sample};
use crate::preprocess::{encode_bev_map, filter_range, voxelize, BevMap};
use crate::rng;
use crate::synthetic::generate_scenes;
use crate::tensor::{Adam, ParamStore};
use crate::train::{Augmentation, StepLoss, Trainer, LOSS_LOG_HEADER};

pub const LOSS_LOG_FILE: &str = "loss.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RUN_CONFIG_FILE: &str = "config.toml";

pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub annotation: FrameAnnotation,
    pub calib: Calibration,
}

/// `--frames` accepts a comma-separated list or a file with one id per
/// line.
pub fn parse_frame_list(arg: &str) -> Result<Vec<String>> {
    let p = Path::new(arg);
    let text = if p.is_file() {
        fs::read_to_string(p).map_err(|e| Error::io(p, e))?
    } else {
        arg.replace(',', "\n")
    };
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn synthetic_frames(cfg: &RunConfig) -> Result<Vec<Frame>> {
    let scenes = generate_scenes(&cfg.synthetic, cfg.data.synthetic_frames, &mut rng::derived(cfg.seed, "synthetic"))?;
    Ok(scenes
        .into_iter()
        .map(|(cloud, annotation)| Frame {
            id: annotation.frame_id.clone(),
            cloud,
            annotation,
            calib: Calibration::kitti_nominal(),
        })
        .collect())
}

/// Frame ids of a split. Synthetic data has a single fixed scene set
/// shared by every split.
pub fn split_ids(cfg: &RunConfig, split: &str) -> Result<Vec<String>> {
    match cfg.data.source {
        DataSource::Kitti => KittiDataset::new(&cfg.data.root).split(split),
        DataSource::Synthetic => Ok((0..cfg.data.synthetic_frames).map(|i| format!("{i:06}")).collect()),
    }
}

pub fn load_frames(cfg: &RunConfig, ids: &[String]) -> Result<Vec<Frame>> {
    match cfg.data.source {
        DataSource::Kitti => {
            let ds = KittiDataset::new(&cfg.data.root);
            ids.iter()
                .map(|id| {
                    let (cloud, annotation, calib) = ds.load_frame(id)?;
                    Ok(Frame {
                        id: id.clone(),
                        cloud,
                        annotation,
                        calib,
                    })
                })
                .collect()
        }
        DataSource::Synthetic => {
            let mut all = synthetic_frames(cfg)?;
            ids.iter()
                .map(|id| {
                    let i = all
                        .iter()
                        .position(|f| f.id == *id)
                        .ok_or_else(|| Error::Invalid(format!("no synthetic frame `{id}`")))?;
                    Ok(all.swap_remove(i))
                })
                .collect()
        }
    }
}

fn prepare(cfg: &RunConfig, id: &str, cloud: &PointCloud) -> Sample {
    let cropped = filter_range(cloud, &cfg.grid.range);
    Sample {
        bev: encode_bev_map(&cropped, &cfg.grid),
        voxels: voxelize(&cropped, &cfg.voxelizer, &mut rng::frame_voxelizer(cfg.seed, id)),
    }
}

pub fn cache_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    Ok(out.unwrap_or(&cfg.data.cache_dir).join(cfg.preprocess_key()?))
}

/// Writes `<id>.bev` and `<id>.vox` per frame under the config-keyed cache
/// directory and returns the files written.
pub fn preprocess(cfg: &RunConfig, ids: &[String], out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let dir = cache_dir(cfg, out)?;
    let mut written = Vec::new();
    for f in load_frames(cfg, ids)? {
        let s = prepare(cfg, &f.id, &f.cloud);
        let (b, v) = (cache::bev_path(&dir, &f.id), cache::voxel_path(&dir, &f.id));
        cache::write_bev(&b, &s.bev)?;
        cache::write_voxels(&v, &s.voxels)?;
        if s.voxels.dropped_voxels > 0 {
            warn!("{}: {} voxels beyond the cap were dropped", f.id, s.voxels.dropped_voxels);
        }
        written.extend([b, v]);
    }
    info!("preprocessed {} frames into {}", ids.len(), dir.display());
    Ok(written)
}

/// Renders the BEV map of one frame as an RGB PNG, reusing the cache when
/// present.
pub fn render_bev(cfg: &RunConfig, id: &str, out: &Path) -> Result<BevMap> {
    let cached = cache::bev_path(&cache_dir(cfg, None)?, id);
    let map = if cached.is_file() {
        cache::read_bev(&cached)?
    } else {
        let f = load_frames(cfg, &[id.to_string()])?.remove(0);
        encode_bev_map(&filter_range(&f.cloud, &cfg.grid.range), &cfg.grid)
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    map.write_png(out)?;
    Ok(map)
}

/// Ground-truth database over the training split.
pub fn build_gtdb(cfg: &RunConfig, out: Option<&Path>) -> Result<GtDatabase> {
    let ids = split_ids(cfg, &cfg.data.train_split)?;
    let frames = load_frames(cfg, &ids)?;
    let db = build_gt_database(frames.iter().map(|f| (&f.cloud, &f.annotation)));
    let dir = out.unwrap_or(&cfg.data.gtdb_dir);
    db.save(dir)?;
    info!("saved {} ground-truth entries to {}", db.len(), dir.display());
    Ok(db)
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}"))
}

pub struct TrainSummary {
    pub losses: Vec<StepLoss>,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from a seeded initialisation, writing `loss.log`, the resolved
/// `config.toml` and checkpoints under `out`. The initial checkpoint is
/// always written, then every `checkpoint_every` steps and at the end.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let ids = split_ids(cfg, &cfg.data.train_split)?;
    let frames: Vec<(PointCloud, FrameAnnotation)> =
        load_frames(cfg, &ids)?.into_iter().map(|f| (f.cloud, f.annotation)).collect();
    if frames.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join(RUN_CONFIG_FILE))?;
    let gtdb = if cfg.train.augment && cfg.augment.samples_per_class > 0 && cfg.data.gtdb_dir.is_dir() {
        Some(GtDatabase::load(&cfg.data.gtdb_dir)?)
    } else {
        None
    };
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &mut rng::derived(cfg.seed, "init"), &cfg.model, &cfg.grid, &cfg.voxelizer)?;
    let total = cfg.train.total_steps(frames.len());
    let augment = cfg.train.augment.then_some(Augmentation {
        params: &cfg.augment,
        gtdb: gtdb.as_ref(),
    });
    let adam = Adam::new(cfg.optimizer.adam(total));
    let mut trainer = Trainer::new(&det, adam, &frames, augment, cfg.train.batch_size, cfg.seed)?;

    let log_path = out.join(LOSS_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io)?;
    let mut checkpoints = Vec::new();
    let mut save = |store: &ParamStore, step: usize| -> Result<()> {
        let p = checkpoint_path(out, step);
        store.save(&p)?;
        checkpoints.push(p);
        Ok(())
    };
    save(&store, 0)?;
    let mut losses = Vec::with_capacity(total);
    for _ in 0..total {
        let l = match trainer.step(&mut store) {
            Ok(l) => l,
            Err(e) => {
                log.flush().map_err(io)?;
                return Err(e);
            }
        };
        writeln!(log, "{l}").map_err(io)?;
        let done = l.step + 1;
        if (cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0) || done == total {
            log.flush().map_err(io)?;
            save(&store, done)?;
        }
        if done % 50 == 0 || done == total {
            info!("step {done}/{total}: total loss {:.5}", l.total);
        }
        losses.push(l);
    }
    log.flush().map_err(io)?;
    Ok(TrainSummary {
        losses,
        log: log_path,
        checkpoints,
    })
}

/// Builds the detector for `cfg` and replaces its parameters with the
/// checkpoint's, which must match in names and shapes.
pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<(Detector, ParamStore)> {
    let mut fresh = ParamStore::new();
    let det = Detector::new(&mut fresh, &mut rng::derived(cfg.seed, "init"), &cfg.model, &cfg.grid, &cfg.voxelizer)?;
    let loaded = ParamStore::load(checkpoint)?;
    for (name, t) in fresh.iter() {
        match loaded.get(name) {
            Some(l) if l.shape() == t.shape() => {}
            Some(l) => {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    l.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Config(format!("checkpoint lacks parameter `{name}`"))),
        }
    }
    if loaded.len() != fresh.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            fresh.len()
        )));
    }
    Ok((det, loaded))
}

pub fn detect_frames(cfg: &RunConfig, det: &Detector, store: &ParamStore, frames: &[Frame]) -> Result<Vec<Vec<crate::dataset::Detection>>> {
    frames
        .iter()
        .map(|f| {
            let s = prepare(cfg, &f.id, &f.cloud);
            det.detect(store, &s, &mut rng::derived(cfg.seed, &format!("detect/{}", f.id)))
        })
        .collect()
}

/// Detects on a split and writes `metrics.txt` and `metrics.kv` to `out`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: &str, out: &Path) -> Result<EvalReport> {
    let (det, store) = load_detector(cfg, checkpoint)?;
    let frames = load_frames(cfg, &split_ids(cfg, split)?)?;
    let dets = detect_frames(cfg, &det, &store, &frames)?;
    let gts: Vec<FrameAnnotation> = frames.into_iter().map(|f| f.annotation).collect();
    let report = evaluate(&dets, &gts, &cfg.eval)?;
    report.write(out)?;
    Ok(report)
}

/// One KITTI result file per frame, `<out>/<id>.txt`.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, ids: &[String], out: &Path) -> Result<Vec<PathBuf>> {
    let (det, store) = load_detector(cfg, checkpoint)?;
    let frames = load_frames(cfg, ids)?;
    let dets = detect_frames(cfg, &det, &store, &frames)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    frames
        .iter()
        .zip(&dets)
        .map(|(f, d)| {
            let p = out.join(format!("{}.txt", f.id));
            write_kitti_results(&p, d, &f.calib)?;
            Ok(p)
        })
        .collect()
}

pub fn format_gradcheck(results: &[BlockCheck]) -> String {
    let mut s = format!("{:<28} {:>8} {:>12} {:>10}  result\n", "block", "coords", "max_rel_err", "tolerance");
    for c in results {
        s += &format!(
            "{:<28} {:>8} {:>12.3e} {:>10.0e}  {}\n",
            c.name,
            c.report.coordinates,
            c.report.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

/// Runs every block check; the report also goes to `<out>/gradcheck.txt`
/// when `out` is given.
pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<BlockCheck>> {
    let results = checks::run_all(cfg.seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("gradcheck.txt");
        fs::write(&p, format_gradcheck(&results)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_lists() {
        assert_eq!(parse_frame_list("000001, 000002").unwrap(), ["000001", "000002"]);
        assert!(parse_frame_list("").unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.txt");
        fs::write(&p, "a\n\nb\n").unwrap();
        assert_eq!(parse_frame_list(p.to_str().unwrap()).unwrap(), ["a", "b"]);
    }
}
