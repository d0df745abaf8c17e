//! Central-difference checks of every differentiable path used in training.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cases, gradcheck, random_tensor, small_grid};
use sckd::backbone::{voxelize, Encoder, EncoderConfig, Multiscale, MultiscaleConfig};
use sckd::fusion::{AdaptiveFusion, FusionConfig, GateState, WeightMode};
use sckd::head::{assign_targets, gt_loss, AnchorConfig, AnchorGrid, DetectionHead, LossConfig};
use sckd::params::ParamStore;
use sckd::scene::{Modality, PointCloudFrame};
use sckd::{Box3D, ObjectClass, Tensor};

const TOL: f64 = 1e-4;

fn assert_close(name: &str, r: common::GradCheck) {
    assert!(r.checked >= 20, "{name}: only {} coordinates", r.checked);
    assert!(
        r.max_rel <= TOL,
        "{name}: rel {:.3e} at {}",
        r.max_rel,
        r.worst
    );
}

fn radar_frame(seed: u64) -> PointCloudFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f64> = (0..60)
        .flat_map(|_| {
            [
                rng.gen_range(0.0..6.4),
                rng.gen_range(-3.2..3.2),
                rng.gen_range(-2.0..1.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-3.0..3.0),
            ]
        })
        .collect();
    PointCloudFrame::new(0, Modality::Radar, pts).unwrap()
}

#[test]
fn encoder_weights() {
    let grid = small_grid();
    let enc = Encoder::new("enc", Modality::Radar, grid, EncoderConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = enc.init(&mut rng);
    // Zero biases put every empty voxel exactly on the ReLU kink.
    store.insert("enc.conv3d.b", random_tensor(&[4], 0.2, &mut rng));
    store.insert("enc.conv2d.b", random_tensor(&[16], 0.2, &mut rng));
    let set = voxelize(&radar_frame(2), &grid).unwrap();
    let (h, w) = enc.output_dims();
    let target = random_tensor(&[1, 16, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let r = gradcheck(
        &store,
        &[
            "enc.conv3d.w",
            "enc.conv3d.b",
            "enc.conv2d.w",
            "enc.conv2d.b",
        ],
        8,
        4,
        |tape, p| {
            let y = enc.forward(tape, p, &[&set])?;
            let t = tape.constant(target.clone());
            tape.mse(y, t)
        },
    );
    assert_close("encoder", r);
}

#[test]
fn multiscale_weights_and_input() {
    let neck = Multiscale::new("neck", 4, MultiscaleConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = neck.init(&mut rng);
    for b in [
        "neck.conv1.b",
        "neck.conv2.b",
        "neck.down1.b",
        "neck.down2.b",
    ] {
        store.insert(b, random_tensor(&[16], 0.2, &mut rng));
    }
    store.insert("x", random_tensor(&[2, 4, 8, 8], 1.0, &mut rng));
    let target = random_tensor(&[2, neck.out_channels(), 8, 8], 1.0, &mut rng);
    let r = gradcheck(
        &store,
        &["x", "neck.conv1.w", "neck.down1.w", "neck.down2.b"],
        6,
        6,
        |tape, p| {
            let y = neck.forward(tape, p, p.get("x")?)?;
            let t = tape.constant(target.clone());
            tape.mse(y, t)
        },
    );
    assert_close("multiscale", r);
}

fn fusion_store(mode: WeightMode, seed: u64) -> (AdaptiveFusion, ParamStore, Tensor) {
    let cfg = FusionConfig {
        weights: mode,
        ..FusionConfig::default()
    };
    let af = AdaptiveFusion::new("af", 4, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = af.init(&mut rng);
    store.insert("f_l", random_tensor(&[3, 4, 5, 5], 1.0, &mut rng));
    store.insert("f_r", random_tensor(&[3, 4, 5, 5], 1.0, &mut rng));
    let target = random_tensor(&[3, 8, 5, 5], 1.0, &mut rng);
    (af, store, target)
}

#[test]
fn fusion_training_mode() {
    for mode in [WeightMode::PerChannel, WeightMode::Scalar] {
        let (af, store, target) = fusion_store(mode, 7);
        let gates = [
            GateState::OPEN,
            GateState {
                g_l: 0,
                g_r: 1,
                draws: None,
            },
            GateState::OPEN,
        ];
        let r = gradcheck(
            &store,
            &[
                "f_l",
                "f_r",
                "af.conv.w",
                "af.conv.b",
                "af.bn.gamma",
                "af.bn.beta",
            ],
            5,
            8,
            |tape, p| {
                let out = af.forward(tape, p, p.get("f_l")?, p.get("f_r")?, &gates, true)?;
                let t = tape.constant(target.clone());
                tape.mse(out.fused, t)
            },
        );
        assert_close("fusion", r);
    }
}

#[test]
fn fusion_eval_mode() {
    let (af, store, target) = fusion_store(WeightMode::PerChannel, 9);
    let gates = [GateState::OPEN; 3];
    let r = gradcheck(
        &store,
        &["f_l", "f_r", "af.conv.w", "af.bn.gamma"],
        6,
        10,
        |tape, p| {
            let out = af.forward(tape, p, p.get("f_l")?, p.get("f_r")?, &gates, false)?;
            let t = tape.constant(target.clone());
            tape.mse(out.fused, t)
        },
    );
    assert_close("fusion eval", r);
}

#[test]
fn detection_head_gt_loss() {
    let head = DetectionHead::new("head", 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = head.init(&mut rng);
    store.insert("head.reg.w", random_tensor(&[42, 4, 1, 1], 0.5, &mut rng));
    store.insert("x", random_tensor(&[1, 4, 8, 8], 1.0, &mut rng));
    let grid = AnchorGrid::new(&AnchorConfig::default(), &small_grid(), 1);
    let boxes = [
        Box3D::new([2.0, 0.4, -0.8], [3.9, 1.6, 1.56], 0.3, ObjectClass::Car),
        Box3D::new(
            [4.0, -1.2, -0.7],
            [1.76, 0.6, 1.73],
            2.0,
            ObjectClass::Cyclist,
        ),
    ];
    let targets = vec![assign_targets(&grid, &boxes, &AnchorConfig::default()).unwrap()];
    let r = gradcheck(
        &store,
        &["x", "head.cls.w", "head.cls.b", "head.reg.w", "head.reg.b"],
        5,
        12,
        |tape, p| {
            let out = head.predict(tape, p, p.get("x")?)?;
            let (c, r) = gt_loss(tape, &out, &grid, &targets, &LossConfig::default())?;
            tape.combine(&[(c, 1.0), (r, 1.0)])
        },
    );
    assert_close("head", r);
}

#[test]
fn lidar_feature_distillation() {
    assert_close("lrfd", cases::lrfd(13).check(8, 1));
}

#[test]
fn fusion_feature_distillation_two_adapters() {
    assert_close("frfd two", cases::frfd(14, true).check(6, 2));
}

#[test]
fn fusion_feature_distillation_one_adapter() {
    assert_close("frfd one", cases::frfd(15, false).check(8, 3));
}

#[test]
fn output_distillation() {
    assert_close("ssod", cases::ssod(16).check(5, 4));
}

#[test]
fn total_objective_default_weights() {
    assert_close("total", cases::total(17, None, false).check(4, 5));
}

#[test]
fn total_objective_heavy_weights_with_gt() {
    assert_close("total gt", cases::total(18, Some(0.7), true).check(4, 6));
}
