mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracle::{random_box, random_detections};
use sckd::autodiff::Tape;
use sckd::backbone::{voxelize, VoxelGridSpec};
use sckd::distill::{filter_pseudo_labels, total_loss_value, DistillConfig};
use sckd::eval::{ap_from_matches, iou_3d, iou_bev, ApMode};
use sckd::fusion::{AdaptiveFusion, FusionConfig, GateState};
use sckd::head::{decode, encode};
use sckd::scene::{Modality, PointCloudFrame};
use sckd::train::{lr_schedule, OptimizerSpec};
use sckd::{Box3D, ObjectClass};

fn boxes() -> impl Strategy<Value = Box3D> {
    (
        (0.0..25.0f64, -12.0..12.0f64, -2.0..1.0f64),
        (0.3..5.0f64, 0.3..2.5f64, 0.5..2.5f64),
        -PI..PI,
    )
        .prop_map(|((x, y, z), (l, w, h), yaw)| {
            Box3D::new([x, y, z], [l, w, h], yaw, ObjectClass::Car)
        })
}

fn radar_points() -> impl Strategy<Value = Vec<[f64; 5]>> {
    prop::collection::vec(
        (
            0.0..25.6f64,
            -12.8..12.8f64,
            -3.0..2.0f64,
            -20.0..20.0f64,
            -5.0..5.0f64,
        )
            .prop_map(|(x, y, z, r, d)| [x, y, z, r, d]),
        0..80,
    )
}

fn frame(points: &[[f64; 5]]) -> PointCloudFrame {
    PointCloudFrame::new(0, Modality::Radar, points.concat()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn voxelize_ignores_point_order(pts in radar_points(), seed in any::<u64>()) {
        let grid = VoxelGridSpec { max_points_radar: 1000, ..VoxelGridSpec::default() };
        let mut shuffled = pts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = voxelize(&frame(&pts), &grid).unwrap();
        let b = voxelize(&frame(&shuffled), &grid).unwrap();
        prop_assert_eq!(&a.coords, &b.coords);
        prop_assert_eq!(&a.counts, &b.counts);
        for (x, y) in a.features.iter().zip(&b.features) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        prop_assert_eq!(a.counts.iter().sum::<usize>(), pts.len());
    }

    #[test]
    fn voxel_cap_respected(pts in radar_points()) {
        let grid = VoxelGridSpec { max_points_radar: 2, ..VoxelGridSpec::default() };
        let v = voxelize(&frame(&pts), &grid).unwrap();
        prop_assert!(v.counts.iter().all(|&c| (1..=2).contains(&c)));
    }

    #[test]
    fn box_coder_round_trip(b in boxes(), a in boxes()) {
        let back = decode(&encode(&b, &a), &a);
        for i in 0..3 {
            prop_assert!((back.center[i] - b.center[i]).abs() < 1e-9);
            prop_assert!((back.size[i] - b.size[i]).abs() < 1e-9 * b.size[i].max(1.0));
        }
        let dyaw = sckd::boxes::wrap_angle(back.yaw - b.yaw);
        prop_assert!(dyaw.abs() < 1e-9);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in boxes(), dx in -3.0..3.0f64, dy in -3.0..3.0f64, b in boxes()) {
        let mut b = b;
        b.center = [a.center[0] + dx, a.center[1] + dy, a.center[2]];
        for f in [iou_bev, iou_3d] {
            let ab = f(&a, &b).unwrap();
            let ba = f(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            prop_assert!((f(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }
        b.size[2] = a.size[2];
        prop_assert!((iou_3d(&a, &b).unwrap() - iou_bev(&a, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn filter_idempotent_and_monotone(seed in any::<u64>(), s1 in 0.0..1.0f64, s2 in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, s1);
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let once = filter_pseudo_labels(&dets, lo);
        let rescored: Vec<Box3D> = dets.iter().filter(|d| d.score.unwrap() > lo).copied().collect();
        prop_assert_eq!(filter_pseudo_labels(&rescored, lo), once.clone());
        let strict = filter_pseudo_labels(&dets, hi);
        prop_assert!(strict.iter().all(|b| once.contains(b)));
        prop_assert!(strict.len() <= once.len());
    }

    #[test]
    fn ap_monotone_under_removal(
        hits in prop::collection::vec((0.0..1.0f64, any::<bool>()), 1..40),
        extra_gt in 0usize..5,
        pick in any::<prop::sample::Index>(),
    ) {
        let n_gt = hits.iter().filter(|h| h.1).count() + extra_gt;
        prop_assume!(n_gt > 0);
        for mode in [ApMode::Ap11, ApMode::Ap40] {
            let base = ap_from_matches(hits.clone(), n_gt, mode);
            let i = pick.index(hits.len());
            let mut fewer = hits.clone();
            let (_, tp) = fewer.remove(i);
            let after = ap_from_matches(fewer, n_gt, mode);
            if tp {
                prop_assert!(after <= base + 1e-9);
            } else {
                prop_assert!(after >= base - 1e-9);
            }
        }
    }

    #[test]
    fn lr_within_bounds(total in 2usize..3000, frac in 0.0..1.0f64) {
        let spec = OptimizerSpec::default();
        let step = ((total - 1) as f64 * frac) as usize;
        let lr = lr_schedule(step, total, &spec).unwrap();
        prop_assert!((1e-7 - 1e-15..=0.01 + 1e-15).contains(&lr));
    }

    #[test]
    fn total_loss_affine(l in 0.0..10.0f64, f in 0.0..10.0f64, s in 0.0..10.0f64) {
        let cfg = DistillConfig::default();
        let a = total_loss_value(l, f, s, &cfg, None).unwrap();
        let b = total_loss_value(2.0 * l, f, s, &cfg, None).unwrap();
        prop_assert!((b - a - cfg.alpha * l).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn fusion_weights_sum_to_one(seed in any::<u64>(), training in any::<bool>()) {
        let af = AdaptiveFusion::new("af", 4, FusionConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = af.init(&mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let fl = tape.constant(common::random_tensor(&[2, 4, 3, 3], 5.0, &mut rng));
        let fr = tape.constant(common::random_tensor(&[2, 4, 3, 3], 5.0, &mut rng));
        let out = af.forward(&mut tape, &p, fl, fr, &[GateState::OPEN; 2], training).unwrap();
        let (wl, wr) = (tape.value(out.w_l).data(), tape.value(out.w_r).data());
        for (a, b) in wl.iter().zip(wr) {
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
            prop_assert!(*a > 0.0 && *b > 0.0);
        }
    }
}

#[test]
fn random_box_helper_is_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        random_box(&mut rng, None).validate().unwrap();
    }
}
