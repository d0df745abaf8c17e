//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sckd::autodiff::{Tape, Var};
use sckd::backbone::VoxelGridSpec;
use sckd::params::{Bound, ParamStore};
use sckd::{Result, Tensor};

/// An 8x8 BEV grid, small enough for finite differences.
pub fn small_grid() -> VoxelGridSpec {
    VoxelGridSpec {
        range_min: [0.0, -3.2, -3.0],
        range_max: [6.4, 3.2, 2.0],
        ..VoxelGridSpec::default()
    }
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
            .collect(),
    )
    .unwrap()
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Absolute floor for the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-5;

/// Compare tape gradients with central differences on `per_name` random
/// coordinates of every listed tensor in `store`.
pub fn gradcheck<F>(
    store: &ParamStore,
    names: &[&str],
    per_name: usize,
    seed: u64,
    f: F,
) -> GradCheck
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = f(&mut tape, &bound).unwrap();
    let mut grads = tape.backward(loss);
    let analytic = store.gradients(&bound, &mut grads);

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let l = f(&mut t, &b).unwrap();
        t.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for name in names {
        let g = &analytic[*name];
        for _ in 0..per_name {
            let i = rng.gen_range(0..g.len());
            let mut s = store.clone();
            let x = s.get(name).unwrap().data()[i];
            s.get_mut(name).unwrap().data_mut()[i] = x + STEP;
            let up = eval(&s);
            s.get_mut(name).unwrap().data_mut()[i] = x - STEP;
            let down = eval(&s);
            let numeric = (up - down) / (2.0 * STEP);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    report
}

pub type LossFn = Box<dyn Fn(&mut Tape, &Bound) -> Result<Var>>;

/// A loss together with the tensors it is differentiated against.
pub struct Case {
    pub store: ParamStore,
    pub names: Vec<&'static str>,
    pub loss: LossFn,
}

impl Case {
    pub fn check(&self, per_name: usize, seed: u64) -> GradCheck {
        gradcheck(&self.store, &self.names, per_name, seed, &self.loss)
    }
}

pub mod cases {
    use super::*;
    use sckd::boxes::{Box3D, ObjectClass};
    use sckd::distill::{frfd_loss, lrfd_loss, ssod_loss, total_loss, Adapter, DistillConfig};
    use sckd::head::{
        assign_targets, gt_loss, AnchorConfig, AnchorGrid, DetectionHead, LossConfig,
    };

    pub const C: usize = 4;
    const H: usize = 8;
    const W: usize = 8;

    fn perturbed(store: ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, t) in store.iter() {
            let noise = random_tensor(t.shape(), 0.1, rng);
            let data = t
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect();
            out.insert(k.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
        }
        out
    }

    fn pseudo_labels() -> Vec<Vec<Box3D>> {
        vec![
            vec![
                Box3D::new([2.0, 0.4, -0.8], [3.9, 1.6, 1.56], 0.1, ObjectClass::Car),
                Box3D::new(
                    [4.8, -2.0, -0.7],
                    [0.8, 0.6, 1.73],
                    1.4,
                    ObjectClass::Pedestrian,
                ),
            ],
            vec![Box3D::new(
                [3.6, 1.6, -0.7],
                [1.76, 0.6, 1.73],
                -0.3,
                ObjectClass::Cyclist,
            )],
        ]
    }

    fn anchors() -> AnchorGrid {
        AnchorGrid::new(&AnchorConfig::default(), &small_grid(), 1)
    }

    pub fn lrfd(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ad = Adapter::new("ad_l", C, C, 3);
        let mut store = perturbed(ad.init_identity(), &mut rng);
        store.insert("f_r_s", random_tensor(&[2, C, H, W], 1.0, &mut rng));
        let teacher = random_tensor(&[2, C, H, W], 1.0, &mut rng);
        Case {
            store,
            names: vec!["f_r_s", "ad_l.w", "ad_l.b"],
            loss: Box::new(move |tape, p| {
                let t = tape.constant(teacher.clone());
                lrfd_loss(tape, p, p.get("f_r_s")?, t, &ad)
            }),
        }
    }

    pub fn frfd(seed: u64, two: bool) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ads = if two {
            vec![
                Adapter::new("ad_fl", C, C, 3),
                Adapter::new("ad_fr", C, C, 3),
            ]
        } else {
            vec![Adapter::new("ad_f", C, 2 * C, 3)]
        };
        let mut store = ParamStore::new();
        for a in &ads {
            store.extend(a.init_identity());
        }
        let mut store = perturbed(store, &mut rng);
        store.insert("f_r_s", random_tensor(&[2, C, H, W], 1.0, &mut rng));
        let teacher = random_tensor(&[2, 2 * C, H, W], 1.0, &mut rng);
        let names = if two {
            vec!["f_r_s", "ad_fl.w", "ad_fr.w", "ad_fr.b"]
        } else {
            vec!["f_r_s", "ad_f.w", "ad_f.b"]
        };
        Case {
            store,
            names,
            loss: Box::new(move |tape, p| {
                let t = tape.constant(teacher.clone());
                frfd_loss(tape, p, p.get("f_r_s")?, t, &ads)
            }),
        }
    }

    pub fn ssod(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = DetectionHead::new("head", C);
        let mut store = head.init(&mut rng);
        store.insert("head.cls.w", random_tensor(&[18, C, 1, 1], 0.5, &mut rng));
        store.insert("head.reg.w", random_tensor(&[42, C, 1, 1], 0.5, &mut rng));
        store.insert("f_r_s", random_tensor(&[2, C, H, W], 1.0, &mut rng));
        let grid = anchors();
        let pseudo = pseudo_labels();
        Case {
            store,
            names: vec![
                "f_r_s",
                "head.cls.w",
                "head.cls.b",
                "head.reg.w",
                "head.reg.b",
            ],
            loss: Box::new(move |tape, p| {
                let out = head.predict(tape, p, p.get("f_r_s")?)?;
                ssod_loss(
                    tape,
                    &out,
                    &pseudo,
                    &grid,
                    &AnchorConfig::default(),
                    &LossConfig::default(),
                )
            }),
        }
    }

    /// Full student objective; `weights` overrides α and β, `use_gt` adds the GT term.
    pub fn total(seed: u64, weights: Option<f64>, use_gt: bool) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = DistillConfig {
            use_gt,
            ..DistillConfig::default()
        };
        if let Some(w) = weights {
            cfg.alpha = w;
            cfg.beta = w;
        }
        let head = DetectionHead::new("head", C);
        let ad_l = Adapter::new("ad_l", C, C, 3);
        let ads = vec![
            Adapter::new("ad_fl", C, C, 3),
            Adapter::new("ad_fr", C, C, 3),
        ];
        let mut store = head.init(&mut rng);
        store.extend(ad_l.init_identity());
        for a in &ads {
            store.extend(a.init_identity());
        }
        let mut store = perturbed(store, &mut rng);
        store.insert("f_r_s", random_tensor(&[2, C, H, W], 1.0, &mut rng));
        let f_l = random_tensor(&[2, C, H, W], 1.0, &mut rng);
        let f_f = random_tensor(&[2, 2 * C, H, W], 1.0, &mut rng);
        let grid = anchors();
        let pseudo = pseudo_labels();
        let gt: Vec<Vec<Box3D>> = pseudo.iter().rev().cloned().collect();
        Case {
            store,
            names: vec![
                "f_r_s",
                "ad_l.w",
                "ad_fl.w",
                "ad_fr.b",
                "head.cls.w",
                "head.reg.w",
            ],
            loss: Box::new(move |tape, p| {
                let x = p.get("f_r_s")?;
                let tl = tape.constant(f_l.clone());
                let tf = tape.constant(f_f.clone());
                let l = lrfd_loss(tape, p, x, tl, &ad_l)?;
                let f = frfd_loss(tape, p, x, tf, &ads)?;
                let out = head.predict(tape, p, x)?;
                let acfg = AnchorConfig::default();
                let lcfg = LossConfig::default();
                let s = ssod_loss(tape, &out, &pseudo, &grid, &acfg, &lcfg)?;
                let g = if use_gt {
                    let targets = gt
                        .iter()
                        .map(|b| assign_targets(&grid, b, &acfg))
                        .collect::<Result<Vec<_>>>()?;
                    let (c, r) = gt_loss(tape, &out, &grid, &targets, &lcfg)?;
                    Some(tape.combine(&[(c, 1.0), (r, 1.0)])?)
                } else {
                    None
                };
                total_loss(tape, l, f, s, &cfg, g)
            }),
        }
    }
}

pub mod oracle {
    use super::*;
    use sckd::boxes::{Box3D, Detection, ObjectClass};

    /// Point-in-box written from scratch: rotate into the box frame.
    fn inside(b: &Box3D, p: [f64; 3], three_d: bool) -> bool {
        let (dx, dy) = (p[0] - b.center[0], p[1] - b.center[1]);
        let (sin, cos) = (-b.yaw).sin_cos();
        let u = dx * cos - dy * sin;
        let v = dx * sin + dy * cos;
        let in_bev = 2.0 * u.abs() <= b.size[0] && 2.0 * v.abs() <= b.size[1];
        in_bev && (!three_d || 2.0 * (p[2] - b.center[2]).abs() <= b.size[2])
    }

    /// Monte-Carlo IoU over the joint bounding region.
    pub fn mc_iou(
        a: &Box3D,
        b: &Box3D,
        samples: usize,
        three_d: bool,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let lo = |i: usize, r: f64| (a.center[i] - r).min(b.center[i] - r);
        let ra = a.bev_radius().max(b.bev_radius());
        let hz = a.size[2].max(b.size[2]) / 2.0;
        let (x0, y0, z0) = (lo(0, ra), lo(1, ra), lo(2, hz));
        let x1 = (a.center[0] + ra).max(b.center[0] + ra);
        let y1 = (a.center[1] + ra).max(b.center[1] + ra);
        let z1 = (a.center[2] + hz).max(b.center[2] + hz);
        let (mut both, mut either) = (0usize, 0usize);
        for _ in 0..samples {
            let p = [
                rng.gen_range(x0..x1),
                rng.gen_range(y0..y1),
                rng.gen_range(z0..z1),
            ];
            let (ia, ib) = (inside(a, p, three_d), inside(b, p, three_d));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
        if either == 0 {
            0.0
        } else {
            both as f64 / either as f64
        }
    }

    pub fn random_class(rng: &mut ChaCha8Rng) -> ObjectClass {
        ObjectClass::ALL[rng.gen_range(0..3)]
    }

    pub fn random_box(rng: &mut ChaCha8Rng, near: Option<[f64; 3]>) -> Box3D {
        let center = match near {
            Some(c) => [
                c[0] + rng.gen_range(-2.0..2.0),
                c[1] + rng.gen_range(-2.0..2.0),
                c[2] + rng.gen_range(-0.8..0.8),
            ],
            None => [
                rng.gen_range(0.0..25.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-1.5..0.5),
            ],
        };
        Box3D::new(
            center,
            [
                rng.gen_range(0.4..4.5),
                rng.gen_range(0.4..2.0),
                rng.gen_range(0.8..2.0),
            ],
            rng.gen_range(-3.2..3.2),
            random_class(rng),
        )
    }

    /// Reference threshold filter.
    pub fn brute_filter(dets: &[Detection], sigma: f64) -> Vec<Box3D> {
        let mut out = Vec::new();
        for d in dets {
            if let Some(s) = d.score {
                if s > sigma {
                    let mut b = *d;
                    b.score = None;
                    out.push(b);
                }
            }
        }
        out
    }

    /// Random detection set; some confidences sit exactly on `sigma`.
    pub fn random_detections(rng: &mut ChaCha8Rng, sigma: f64) -> Vec<Detection> {
        let n = rng.gen_range(0..30);
        (0..n)
            .map(|_| {
                let s = match rng.gen_range(0..4) {
                    0 => sigma,
                    _ => rng.gen::<f64>(),
                };
                random_box(rng, None).with_score(s)
            })
            .collect()
    }
}

pub mod staircase {
    use sckd::eval::{ap_class, ApMode, EvalConfig, IouKind};
    use sckd::{Box3D, Detection, ObjectClass};

    /// A car at `x` on the x-axis.
    pub fn car(x: f64) -> Box3D {
        Box3D::new([x, 0.0, -0.8], [3.9, 1.6, 1.56], 0.0, ObjectClass::Car)
    }

    /// One frame from a rank-ordered hit/miss pattern: hits copy the next
    /// unmatched ground truth, misses sit far from every ground truth.
    pub fn staircase(pattern: &str, n_gt: usize) -> (Vec<Detection>, Vec<Box3D>) {
        let gts: Vec<Box3D> = (0..n_gt).map(|i| car(3.0 + 5.0 * i as f64)).collect();
        let mut next = 0;
        let dets = pattern
            .chars()
            .enumerate()
            .map(|(rank, c)| {
                let score = 0.99 - 0.01 * rank as f64;
                let b = if c == 'T' {
                    next += 1;
                    gts[next - 1]
                } else {
                    let mut b = car(3.0 + 5.0 * rank as f64);
                    b.center[1] = 10.0;
                    b
                };
                b.with_score(score)
            })
            .collect();
        (dets, gts)
    }

    pub fn ap(pattern: &str, n_gt: usize, mode: ApMode) -> f64 {
        let (d, g) = staircase(pattern, n_gt);
        let cfg = EvalConfig {
            mode,
            iou_kind: IouKind::ThreeD,
            ..EvalConfig::default()
        };
        ap_class(&d, &g, ObjectClass::Car, &cfg)
    }

    pub const STAIRCASES: [(&str, usize, f64, f64); 8] = [
        // No detections.
        ("", 3, 0.0, 0.0),
        // Perfect ranking.
        ("TTTT", 4, 100.0, 100.0),
        // Envelope 1, 2/3, 0.6 up to recall 0.25, 0.5, 0.75.
        (
            "TFTFT",
            4,
            100.0 * 6.2 / 11.0,
            100.0 * (10.0 + 20.0 / 3.0 + 6.0) / 40.0,
        ),
        // Leading false positive caps precision at 2/3 everywhere.
        ("FTT", 2, 200.0 / 3.0, 200.0 / 3.0),
        ("FFF", 2, 0.0, 0.0),
        // Trailing miss after full recall does not lower AP.
        ("TF", 1, 100.0, 100.0),
        // Recall stops at 1/3: four AP11 points, thirteen AP40 points.
        ("T", 3, 400.0 / 11.0, 32.5),
        // Detections without ground truth.
        ("FF", 0, 0.0, 0.0),
    ];
}
