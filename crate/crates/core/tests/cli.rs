use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::process::{Command, Output};

use pointfuse::commands;
use pointfuse::config::{DataSource, RunConfig};
use pointfuse::dataset::{
    read_kitti_results, Calibration, FrameAnnotation, GtDatabase, KittiDataset, LabeledObject, ObjectClass, Point, PointCloud,
};
use pointfuse::geometry::Box3D;
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn car(x: f64, y: f64) -> LabeledObject {
    LabeledObject {
        class: ObjectClass::Car,
        bbox: Box3D::new([x, y, -0.9], [1.6, 3.9, 1.5], 0.2).unwrap(),
        occlusion: 0,
        truncation: 0.0,
        bbox_height: 50.0,
    }
}

/// Two frames with one car each, surrounded by a few ground points.
fn tiny_kitti(tmp: &TempDir) -> RunConfig {
    let root = tmp.path().join("kitti");
    let ds = KittiDataset::new(&root);
    let calib = Calibration::kitti_nominal();
    let ids: Vec<String> = vec!["000000".into(), "000001".into()];
    for (k, id) in ids.iter().enumerate() {
        let obj = car(10.0 + 5.0 * k as f64, 2.0);
        let mut pts = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            pts.push(Point::new(obj.bbox.x - 0.5 + t, obj.bbox.y - 1.0 + 2.0 * t, -1.2 + 0.5 * t, 0.4));
            pts.push(Point::new(5.0 + 30.0 * t, -10.0 + 20.0 * t, -1.7, 0.1));
        }
        let ann = FrameAnnotation { frame_id: id.clone(), objects: vec![obj] };
        ds.write_frame(id, &PointCloud::new(pts), &ann, &calib).unwrap();
    }
    ds.write_split("train", &ids).unwrap();
    ds.write_split("val", &ids[1..]).unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.root = root;
    cfg.data.cache_dir = tmp.path().join("cache");
    cfg.data.gtdb_dir = tmp.path().join("gtdb");
    cfg
}

fn write_config(cfg: &RunConfig, dir: &Path) -> String {
    let p = dir.join("run.toml");
    cfg.save(&p).unwrap();
    p.to_str().unwrap().to_string()
}

fn decode_png(path: &Path) -> (u32, u32, Vec<u8>) {
    let dec = png::Decoder::new(Cursor::new(fs::read(path).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Rgb);
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[test]
fn preprocess_writes_two_files_per_frame() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_kitti(&tmp);
    let files = commands::preprocess(&cfg, &["000000".into(), "000001".into()], None).unwrap();
    assert_eq!(files.len(), 4);
    let dir = commands::cache_dir(&cfg, None).unwrap();
    assert!(files.iter().all(|f| f.starts_with(&dir) && f.is_file()));
    assert!(commands::preprocess(&cfg, &[], None).unwrap().is_empty());
}

#[test]
fn preprocess_reports_missing_frames() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_kitti(&tmp);
    let err = commands::preprocess(&cfg, &["000042".into()], None).unwrap_err();
    assert_eq!(err.kind(), "io");
}

#[test]
fn gtdb_collects_training_objects() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_kitti(&tmp);
    let db = commands::build_gtdb(&cfg, None).unwrap();
    assert_eq!(db.len(), 2);
    assert!(db.entries.iter().all(|e| e.class == ObjectClass::Car && !e.points.is_empty()));
    let back = GtDatabase::load(&cfg.data.gtdb_dir).unwrap();
    assert_eq!(back.len(), 2);
}

#[test]
fn render_bev_of_empty_and_single_point_clouds() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_kitti(&tmp);
    let ds = KittiDataset::new(&cfg.data.root);
    let calib = Calibration::kitti_nominal();
    let empty = FrameAnnotation { frame_id: "e".into(), objects: vec![] };
    ds.write_frame("e", &PointCloud::new(vec![]), &empty, &calib).unwrap();
    let one = FrameAnnotation { frame_id: "p".into(), objects: vec![] };
    ds.write_frame("p", &PointCloud::new(vec![Point::new(20.05, 0.05, -0.5, 0.5)]), &one, &calib).unwrap();

    let out = tmp.path().join("png/e.png");
    commands::render_bev(&cfg, "e", &out).unwrap();
    let (w, h, px) = decode_png(&out);
    assert_eq!((w, h), (608, 608));
    assert!(px.iter().all(|&v| v == 0));

    // The cache path is exercised as well as the direct one.
    cfg.data.cache_dir = tmp.path().join("cache2");
    commands::preprocess(&cfg, &["p".into()], None).unwrap();
    let out = tmp.path().join("p.png");
    let map = commands::render_bev(&cfg, "p", &out).unwrap();
    let (_, _, px) = decode_png(&out);
    let lit: Vec<usize> = (0..px.len() / 3).filter(|&i| px[3 * i..3 * i + 3] != [0, 0, 0]).collect();
    assert_eq!(lit.len(), 1);
    let (row, col) = cfg.grid.cell_of(20.05, 0.05).unwrap();
    assert_eq!(lit[0], row * 608 + col);
    let d = map.data.data();
    for c in 0..3 {
        let v = d[c * 608 * 608 + lit[0]];
        assert_eq!(px[3 * lit[0] + c], (v * 255.0).round() as u8);
    }
    // One point in a cell: ln 2 / ln 64 = 1/6.
    assert_eq!(px[3 * lit[0]], (255.0f64 / 6.0).round() as u8);
    assert_eq!(px[3 * lit[0] + 2], 128);
}

#[test]
fn zero_step_training_keeps_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.train.max_steps = Some(0);
    let s = commands::train(&cfg, tmp.path()).unwrap();
    assert!(s.losses.is_empty());
    assert_eq!(s.checkpoints, vec![commands::checkpoint_path(tmp.path(), 0)]);
    let log = fs::read_to_string(tmp.path().join(commands::LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let saved = RunConfig::load(&tmp.path().join(commands::RUN_CONFIG_FILE)).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn infer_results_parse_back() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.train.max_steps = Some(2);
    let s = commands::train(&cfg, tmp.path()).unwrap();
    let ckpt = s.checkpoints.last().unwrap();
    let ids: Vec<String> = vec!["000000".into(), "000003".into()];
    let out = tmp.path().join("results");
    let files = commands::infer(&cfg, ckpt, &ids, &out).unwrap();
    assert_eq!(files, vec![out.join("000000.txt"), out.join("000003.txt")]);
    let frames = commands::load_frames(&cfg, &ids).unwrap();
    let (det, store) = commands::load_detector(&cfg, ckpt).unwrap();
    let direct = commands::detect_frames(&cfg, &det, &store, &frames).unwrap();
    for ((f, d), frame) in files.iter().zip(&direct).zip(&frames) {
        let back = read_kitti_results(f, &frame.calib).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in back.iter().zip(d) {
            assert_eq!(a.class, b.class);
            assert!((a.score - b.score).abs() < 1e-3);
            assert!((a.bbox.x - b.bbox.x).abs() < 0.02 && (a.bbox.y - b.bbox.y).abs() < 0.02);
        }
    }
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::toy();
    cfg.train.max_steps = Some(0);
    let s = commands::train(&cfg, tmp.path()).unwrap();
    let mut other = cfg.clone();
    other.model.neck.width *= 2;
    assert!(commands::load_detector(&other, &s.checkpoints[0]).is_err());
}

#[test]
fn synthetic_splits_share_ids() {
    let cfg = RunConfig::toy();
    assert_eq!(cfg.data.source, DataSource::Synthetic);
    let train = commands::split_ids(&cfg, "train").unwrap();
    assert_eq!(train.len(), cfg.data.synthetic_frames);
    assert_eq!(train, commands::split_ids(&cfg, "val").unwrap());
}

#[test]
fn binary_pipeline_on_tiny_kitti() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_kitti(&tmp);
    let conf = write_config(&cfg, tmp.path());
    let o = bin(&["preprocess", "--config", &conf, "--frames", "000000,000001"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote 4 cache files"));
    let o = bin(&["build-gtdb", "--config", &conf]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("stored 2 objects"));
    let png = tmp.path().join("bev.png");
    let o = bin(&["render-bev", "--config", &conf, "--frames", "000001", "--out", png.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(decode_png(&png).0, 608);
}

#[test]
fn binary_train_eval_and_infer() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    let o = bin(&["train-toy", "--steps", "2", "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = commands::checkpoint_path(&run, 2);
    assert!(ckpt.exists());
    let conf = run.join(commands::RUN_CONFIG_FILE);
    let (conf, ckpt) = (conf.to_str().unwrap(), ckpt.to_str().unwrap());

    let ev = tmp.path().join("eval");
    let o = bin(&["eval", "--config", conf, "--checkpoint", ckpt, "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_dir(&ev).unwrap().count() >= 1);

    let inf = tmp.path().join("inf");
    let o = bin(&["infer", "--config", conf, "--checkpoint", ckpt, "--frames", "000001", "--out", inf.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(inf.join("000001.txt").is_file());
}

#[test]
fn binary_reports_error_kinds() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nbogus_key = 3\n").unwrap();
    let o = bin(&["preprocess", "--config", bad.to_str().unwrap(), "--frames", "000000"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));

    let o = bin(&["eval", "--checkpoint", tmp.path().join("nope").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error["));

    let o = bin(&["render-bev", "--frames", "a,b", "--out", "x.png"]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[invalid]"));
}

#[test]
fn gradcheck_lists_every_block() {
    let tmp = TempDir::new().unwrap();
    let results = commands::gradcheck(&RunConfig::default(), Some(tmp.path())).unwrap();
    let text = fs::read_to_string(tmp.path().join("gradcheck.txt")).unwrap();
    assert_eq!(text.lines().count(), results.len() + 1);
    for r in &results {
        assert!(r.passed(), "{}", r.name);
        assert!(text.contains(r.name));
    }
}
