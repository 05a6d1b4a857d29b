use std::f64::consts::PI;
use std::path::Path;

use pointfuse::cache;
use pointfuse::dataset::{decode_velodyne, encode_velodyne, Detection, FrameAnnotation, LabeledObject, ObjectClass, Point, PointCloud};
use pointfuse::eval::{compute_ap_r40, Difficulty, EvalConfig, EvalMode};
use pointfuse::geometry::{bev_iou, iou_3d, nms_bev, normalize_angle, Box3D};
use pointfuse::head::{decode_box, encode_box};
use pointfuse::preprocess::{flip_scene, scale_scene, voxelize, VoxelSpec};
use pointfuse::rng;
use pointfuse::train::StepLoss;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box3D> {
    (
        -20.0..20.0f64,
        -20.0..20.0f64,
        -3.0..1.0f64,
        0.2..4.0f64,
        0.2..6.0f64,
        0.2..3.0f64,
        -PI..PI,
    )
        .prop_map(|(x, y, z, w, l, h, yaw)| Box3D::new([x, y, z], [w, l, h], yaw).unwrap())
}

/// Boxes near the origin so that pairs overlap often.
fn arb_near_box() -> impl Strategy<Value = Box3D> {
    (-2.0..2.0f64, -2.0..2.0f64, 0.5..3.0f64, 0.5..5.0f64, -PI..PI)
        .prop_map(|(x, y, w, l, yaw)| Box3D::new([x, y, -1.0], [w, l, 1.5], yaw).unwrap())
}

fn arb_point() -> impl Strategy<Value = Point> {
    (-5.0..70.0f64, -40.0..40.0f64, -4.0..2.0f64, 0.0..1.0f64).prop_map(|(x, y, z, r)| Point::new(x, y, z, r))
}

/// Reference greedy NMS written against the definition: repeatedly keep
/// the best remaining box and drop everything overlapping it.
fn nms_oracle(boxes: &[Box3D], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && bev_iou(&boxes[best], &boxes[i]) <= thr);
    }
    keep
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bev_iou_is_symmetric_and_bounded(a in arb_near_box(), b in arb_near_box()) {
        let (ab, ba) = (bev_iou(&a, &b), bev_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_3d_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou_3d(&a, &b);
        prop_assert!((v - iou_3d(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_invariant_under_rigid_motion(a in arb_near_box(), b in arb_near_box(), t in -PI..PI, dx in -30.0..30.0f64) {
        let (s, c) = t.sin_cos();
        let mv = |q: &Box3D| Box3D::new([c * q.x - s * q.y + dx, s * q.x + c * q.y, q.z], [q.w, q.l, q.h], q.yaw + t).unwrap();
        prop_assert!((bev_iou(&mv(&a), &mv(&b)) - bev_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn angles_normalize_into_half_open_range(a in -100.0..100.0f64) {
        let n = normalize_angle(a);
        prop_assert!((-PI..PI).contains(&n));
        prop_assert!(((a - n) / (2.0 * PI) - ((a - n) / (2.0 * PI)).round()).abs() < 1e-9);
    }

    #[test]
    fn nms_matches_reference(boxes in prop::collection::vec(arb_near_box(), 0..25), levels in 1u32..6, thr in 0.05..0.9f64) {
        // Coarse scores make ties common.
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i as u32 * 7919) % levels) as f64).collect();
        let got = nms_bev(&boxes, &scores, thr).unwrap();
        prop_assert_eq!(&got, &nms_oracle(&boxes, &scores, thr));
        for (k, &i) in got.iter().enumerate() {
            for &j in &got[k + 1..] {
                prop_assert!(bev_iou(&boxes[i], &boxes[j]) <= thr);
            }
        }
    }

    #[test]
    fn encode_decode_round_trip(anchor in arb_box(), gt in arb_box()) {
        let (r, dir) = encode_box(&anchor, &gt).unwrap();
        let b = decode_box(&anchor, &r, dir);
        for (u, v) in [(b.x, gt.x), (b.y, gt.y), (b.z, gt.z), (b.w, gt.w), (b.l, gt.l), (b.h, gt.h)] {
            prop_assert!((u - v).abs() < 1e-9);
        }
        prop_assert!(normalize_angle(b.yaw - gt.yaw).abs() < 1e-9);
    }

    #[test]
    fn voxelizer_respects_caps(points in prop::collection::vec(arb_point(), 0..400), max_voxels in 1usize..50, max_points in 1usize..6, seed in any::<u64>()) {
        let spec = VoxelSpec { voxel_size: [1.6, 1.6, 1.0], max_voxels, max_points, ..VoxelSpec::KITTI };
        let cloud = PointCloud::new(points);
        let set = voxelize(&cloud, &spec, &mut rng::seeded(seed));
        prop_assert!(set.num_voxels() <= max_voxels);
        prop_assert!(set.counts.iter().all(|&c| (1..=max_points).contains(&c)));
        let mut coords = set.coords.clone();
        coords.sort_unstable();
        coords.dedup();
        prop_assert_eq!(coords.len(), set.num_voxels());
        let in_range = cloud.iter().filter(|p| spec.voxel_of(p).is_some()).count();
        prop_assert!(set.counts.iter().sum::<usize>() <= in_range);
        if set.dropped_voxels == 0 && set.counts.iter().all(|&c| c < max_points) {
            prop_assert_eq!(set.counts.iter().sum::<usize>(), in_range);
        }
    }

    #[test]
    fn voxel_cache_round_trips(points in prop::collection::vec(arb_point(), 0..300), seed in any::<u64>()) {
        let spec = VoxelSpec { max_points: 3, ..VoxelSpec::KITTI };
        let set = voxelize(&PointCloud::new(points), &spec, &mut rng::seeded(seed));
        let back = cache::decode_voxels(&cache::encode_voxels(&set), Path::new("p.vox")).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn velodyne_round_trip_is_f32_exact(points in prop::collection::vec(arb_point(), 0..100)) {
        let narrowed: PointCloud = points
            .iter()
            .map(|p| Point::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64, p.r as f32 as f64))
            .collect();
        let scan = decode_velodyne(&encode_velodyne(&PointCloud::new(points)), Path::new("v.bin")).unwrap();
        prop_assert_eq!(scan.rejected, 0);
        prop_assert_eq!(scan.cloud, narrowed);
    }

    #[test]
    fn flip_is_an_involution_and_scale_is_uniform(points in prop::collection::vec(arb_point(), 2..60), b in arb_box(), s in 0.95..1.05f64) {
        let cloud = PointCloud::new(points);
        let ann = FrameAnnotation { frame_id: "p".into(), objects: vec![labeled(b, 0.9)] };
        let (mut c, mut a) = (cloud.clone(), ann.clone());
        flip_scene(&mut c, &mut a);
        flip_scene(&mut c, &mut a);
        prop_assert_eq!(&c, &cloud);
        prop_assert!(normalize_angle(a.objects[0].bbox.yaw - b.yaw).abs() < 1e-12);
        let (mut c, mut a) = (cloud.clone(), ann.clone());
        scale_scene(&mut c, &mut a, s);
        let n = cloud.len();
        for i in 0..n {
            let j = (i + 1) % n;
            let d0 = cloud.points[i].dist(&cloud.points[j]);
            prop_assert!((c.points[i].dist(&c.points[j]) - s * d0).abs() < 1e-9);
        }
        prop_assert!((a.objects[0].bbox.bev_area() - s * s * b.bev_area()).abs() < 1e-9);
    }

    #[test]
    fn ap_is_invariant_to_monotone_score_maps(
        offsets in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.01..1.0f64), 1..12),
        extra in prop::collection::vec((-20.0..20.0f64, 0.01..1.0f64), 0..5),
        k in 0.5..4.0f64,
    ) {
        let gt: Vec<Box3D> = (0..offsets.len()).map(|i| Box3D::new([5.0 + 6.0 * i as f64, 0.0, -1.0], [1.6, 3.9, 1.5], 0.3).unwrap()).collect();
        let mut dets: Vec<Detection> = gt
            .iter()
            .zip(&offsets)
            .map(|(b, &(dx, dy, s))| Detection { class: ObjectClass::Car, bbox: Box3D { x: b.x + dx, y: b.y + dy, ..*b }, score: s })
            .collect();
        dets.extend(extra.iter().map(|&(y, s)| Detection {
            class: ObjectClass::Car,
            bbox: Box3D::new([30.0, y, -1.0], [1.6, 3.9, 1.5], 0.0).unwrap(),
            score: s,
        }));
        let gts = vec![FrameAnnotation { frame_id: "0".into(), objects: gt.iter().map(|&b| labeled(b, 60.0)).collect() }];
        let cfg = EvalConfig::default();
        let ap = |d: Vec<Detection>| compute_ap_r40(&[d], &gts, &cfg, &ObjectClass::Car, Difficulty::Hard, EvalMode::Bev).unwrap().unwrap();
        let base = ap(dets.clone());
        prop_assert!((0.0..=1.0).contains(&base));
        let warped = dets.iter().map(|d| Detection { score: (k * d.score).tanh() + 2.0, ..d.clone() }).collect();
        prop_assert_eq!(ap(warped), base);
    }

    #[test]
    fn loss_lines_round_trip(step in 0usize..100_000, v in prop::array::uniform4(any::<f64>())) {
        let l = StepLoss { step, loc: v[0], cls: v[1], dir: v[2], total: v[3] };
        let back: StepLoss = l.to_string().parse().unwrap();
        prop_assert_eq!(back.step, step);
        for (a, b) in [(back.loc, v[0]), (back.cls, v[1]), (back.dir, v[2]), (back.total, v[3])] {
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }
}

fn labeled(b: Box3D, height: f64) -> LabeledObject {
    LabeledObject {
        class: ObjectClass::Car,
        bbox: b,
        occlusion: 0,
        truncation: 0.0,
        bbox_height: height,
    }
}
