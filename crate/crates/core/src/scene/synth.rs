//! Synthetic paired lidar/radar scenes.
//!
//! Objects are oriented boxes placed without overlap on a flat ground plane.
//! Lidar samples the sensor-facing surfaces of objects, ground and clutter
//! (poles and bushes that are not labeled), with ray occlusion. Radar is a
//! sparse re-sampling of the lidar returns, biased towards reflective classes,
//! perturbed by truncated Gaussian position noise, with RCS and Doppler
//! channels, plus multipath ghosts mirrored across one random vertical
//! reflector per scene.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frame::{Modality, PointCloudFrame};
use crate::boxes::{Box3D, ObjectClass};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectCounts {
    pub car: u32,
    pub pedestrian: u32,
    pub cyclist: u32,
}

impl ObjectCounts {
    pub fn get(&self, c: ObjectClass) -> u32 {
        match c {
            ObjectClass::Car => self.car,
            ObjectClass::Pedestrian => self.pedestrian,
            ObjectClass::Cyclist => self.cyclist,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Maximum number of objects per class (the actual count is drawn uniformly in `[1, max]`).
    pub n_objects: ObjectCounts,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub ground_z: f64,
    /// Lidar returns on an unoccluded object at 10 m.
    pub lidar_points_per_object: u32,
    /// Lidar ground returns per square meter.
    pub lidar_background_density: f64,
    /// Unlabeled clutter structures per scene.
    pub n_clutter: u32,
    /// Radar points as a fraction of lidar points, in `(0, 0.1]`.
    pub radar_density_ratio: f64,
    /// Radar position noise standard deviation (meters); noise is truncated at 3 sigma.
    pub radar_noise_sigma: f64,
    /// Fraction of radar points that are multipath ghosts, in `[0, 1)`.
    pub ghost_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: ObjectCounts {
                car: 3,
                pedestrian: 3,
                cyclist: 3,
            },
            x_range: [0.0, 25.6],
            y_range: [-12.8, 12.8],
            ground_z: -1.6,
            lidar_points_per_object: 240,
            lidar_background_density: 2.0,
            n_clutter: 5,
            radar_density_ratio: 0.1,
            radar_noise_sigma: 0.1,
            ghost_rate: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.x_range[1] > self.x_range[0] && self.y_range[1] > self.y_range[0],
            Validation,
            "scene area must be non-empty"
        );
        ensure!(
            self.x_range[1] - self.x_range[0] > 6.0 && self.y_range[1] - self.y_range[0] > 6.0,
            Validation,
            "scene area must be at least 6 m on each side"
        );
        ensure!(
            self.lidar_points_per_object > 0,
            Validation,
            "lidar points per object must be positive"
        );
        ensure!(
            self.lidar_background_density > 0.0 && self.lidar_background_density.is_finite(),
            Validation,
            "background density must be positive"
        );
        ensure!(
            self.radar_density_ratio > 0.0 && self.radar_density_ratio <= 0.1,
            Validation,
            "radar density ratio {} outside (0, 0.1]",
            self.radar_density_ratio
        );
        ensure!(
            self.radar_noise_sigma >= 0.0 && self.radar_noise_sigma.is_finite(),
            Validation,
            "radar noise sigma must be non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.ghost_rate),
            Validation,
            "ghost rate {} outside [0, 1)",
            self.ghost_rate
        );
        Ok(())
    }
}

/// Output of [`generate_scene`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub lidar: PointCloudFrame,
    pub radar: PointCloudFrame,
    pub labels: Vec<Box3D>,
    /// Noise-free lidar surface samples that radar points were drawn from.
    pub surface: Vec<[f64; 3]>,
}

/// Per-frame RNG derived from the scene seed and the frame id.
pub fn frame_rng(seed: u64, frame_id: u32) -> ChaCha8Rng {
    let mut z = seed ^ (u64::from(frame_id)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_box(mut b: Box3D) -> Box3D {
    b.center = b.center.map(q);
    b.size = b.size.map(q);
    let mut yaw = q(b.yaw);
    while yaw < -PI {
        yaw = f64::from(f32::from_bits((yaw as f32).to_bits() - 1));
    }
    while yaw >= PI {
        yaw = q(-PI + 1e-6);
    }
    b.yaw = yaw;
    b
}

struct ClassPrior {
    size: [f64; 3],
    jitter: [f64; 3],
    intensity: f64,
    rcs_mean: f64,
    rcs_sd: f64,
    speed: f64,
    radar_weight: f64,
}

fn prior(c: ObjectClass) -> ClassPrior {
    match c {
        ObjectClass::Car => ClassPrior {
            size: [3.9, 1.6, 1.56],
            jitter: [0.3, 0.1, 0.1],
            intensity: 0.6,
            rcs_mean: 10.0,
            rcs_sd: 3.0,
            speed: 10.0,
            radar_weight: 4.0,
        },
        ObjectClass::Pedestrian => ClassPrior {
            size: [0.8, 0.6, 1.73],
            jitter: [0.1, 0.05, 0.1],
            intensity: 0.35,
            rcs_mean: -5.0,
            rcs_sd: 2.0,
            speed: 1.5,
            radar_weight: 2.0,
        },
        ObjectClass::Cyclist => ClassPrior {
            size: [1.76, 0.6, 1.73],
            jitter: [0.1, 0.05, 0.1],
            intensity: 0.5,
            rcs_mean: 0.0,
            rcs_sd: 2.0,
            speed: 5.0,
            radar_weight: 3.0,
        },
    }
}

/// Source of a lidar return, used for radar attribute synthesis.
#[derive(Clone, Copy)]
enum Source {
    Object(usize),
    Clutter,
    Ground,
}

struct Surface {
    pos: [f64; 3],
    source: Source,
}

/// Whether the BEV segment from the sensor origin to `p` crosses the footprint of `b`
/// before reaching `p` (Cyrus-Beck clip of the segment against the rectangle).
fn segment_hits(b: &Box3D, p: [f64; 2]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    // Segment in box-local coordinates.
    let to_local = |x: f64, y: f64| {
        let dx = x - b.center[0];
        let dy = y - b.center[1];
        [c * dx + s * dy, -s * dx + c * dy]
    };
    let a = to_local(0.0, 0.0);
    let e = to_local(p[0], p[1]);
    let hl = b.size[0] / 2.0;
    let hw = b.size[1] / 2.0;
    let (mut t0, mut t1) = (0.0f64, 0.98f64);
    let d = [e[0] - a[0], e[1] - a[1]];
    for (axis, half) in [(0usize, hl), (1usize, hw)] {
        if d[axis].abs() < 1e-12 {
            if a[axis].abs() > half {
                return false;
            }
            continue;
        }
        let mut ta = (-half - a[axis]) / d[axis];
        let mut tb = (half - a[axis]) / d[axis];
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

fn occluded(p: [f64; 3], blockers: &[(usize, Box3D)], own: Option<usize>) -> bool {
    blockers
        .iter()
        .any(|(i, b)| Some(*i) != own && segment_hits(b, [p[0], p[1]]))
}

/// Sample points on the sensor-facing faces of a box.
fn sample_box_surface(b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (s, c) = b.yaw.sin_cos();
    let [l, w, h] = b.size;
    // Faces: (+x, -x, +y, -y) in box frame with outward normals, and the top.
    let faces: [([f64; 2], f64, f64); 4] = [
        ([1.0, 0.0], w, h),
        ([-1.0, 0.0], w, h),
        ([0.0, 1.0], l, h),
        ([0.0, -1.0], l, h),
    ];
    let mut visible = Vec::new();
    for (k, (nrm, extent, height)) in faces.iter().enumerate() {
        let nw = [c * nrm[0] - s * nrm[1], s * nrm[0] + c * nrm[1]];
        let half = if k < 2 { l / 2.0 } else { w / 2.0 };
        let face_center = [b.center[0] + nw[0] * half, b.center[1] + nw[1] * half];
        // Visible if the sensor lies on the outward side of the face.
        if -(face_center[0] * nw[0] + face_center[1] * nw[1]) > 0.0 {
            visible.push((k, extent * height));
        }
    }
    let total: f64 = visible.iter().map(|v| v.1).sum();
    let mut pts = Vec::with_capacity(n);
    if total <= 0.0 {
        return pts;
    }
    for _ in 0..n {
        let mut pick = rng.gen::<f64>() * total;
        let mut face = visible[visible.len() - 1].0;
        for &(k, a) in &visible {
            if pick < a {
                face = k;
                break;
            }
            pick -= a;
        }
        let u = rng.gen::<f64>() - 0.5;
        let zf = rng.gen::<f64>() - 0.5;
        let local = match face {
            0 => [l / 2.0, u * w],
            1 => [-l / 2.0, u * w],
            2 => [u * l, w / 2.0],
            _ => [u * l, -w / 2.0],
        };
        pts.push([
            b.center[0] + c * local[0] - s * local[1],
            b.center[1] + s * local[0] + c * local[1],
            b.center[2] + zf * h,
        ]);
    }
    pts
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    let mut boxes: Vec<Box3D> = Vec::new();
    let margin = 1.5;
    for class in ObjectClass::ALL {
        let max = spec.n_objects.get(class);
        if max == 0 {
            continue;
        }
        let count = rng.gen_range(1..=max);
        let p = prior(class);
        for _ in 0..count {
            for _attempt in 0..100 {
                let size = [
                    p.size[0] + p.jitter[0] * rng.gen_range(-1.0..1.0),
                    p.size[1] + p.jitter[1] * rng.gen_range(-1.0..1.0),
                    p.size[2] + p.jitter[2] * rng.gen_range(-1.0..1.0),
                ];
                let x = rng.gen_range(spec.x_range[0] + margin + 2.0..spec.x_range[1] - margin);
                let y = rng.gen_range(spec.y_range[0] + margin..spec.y_range[1] - margin);
                let yaw = rng.gen_range(-PI..PI);
                let b = quantize_box(Box3D::new(
                    [x, y, spec.ground_z + size[2] / 2.0],
                    size,
                    yaw,
                    class,
                ));
                let clear = boxes.iter().all(|o| {
                    let d = (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]);
                    d > o.bev_radius() + b.bev_radius() + 0.3
                });
                if clear {
                    boxes.push(b);
                    break;
                }
            }
        }
    }
    boxes
}

/// Draw a noise vector with independent `N(0, sigma)` components, rejecting
/// samples whose norm exceeds `3 sigma`.
fn truncated_noise(sigma: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    loop {
        let n = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        if (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() <= 3.0 * sigma * (1.0 - 1e-4) {
            return n;
        }
    }
}

/// Generate one paired lidar/radar scene. Pure function of `(spec, frame_id)`.
pub fn generate_scene(spec: &SceneSpec, frame_id: u32) -> Result<Scene> {
    spec.validate()?;
    let mut rng = frame_rng(spec.seed, frame_id);
    let objects = place_objects(spec, &mut rng);

    // Clutter: thin vertical structures that are not labeled.
    let mut clutter: Vec<Box3D> = Vec::new();
    for _ in 0..spec.n_clutter {
        for _attempt in 0..50 {
            let r = rng.gen_range(0.2..0.6);
            let hgt = rng.gen_range(0.6..2.2);
            let x = rng.gen_range(spec.x_range[0] + 3.0..spec.x_range[1] - 0.5);
            let y = rng.gen_range(spec.y_range[0] + 0.5..spec.y_range[1] - 0.5);
            let b = Box3D::new(
                [x, y, spec.ground_z + hgt / 2.0],
                [2.0 * r, 2.0 * r, hgt],
                rng.gen_range(-PI..PI),
                ObjectClass::Pedestrian,
            );
            let clear = objects.iter().chain(clutter.iter()).all(|o| {
                let d = (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]);
                d > o.bev_radius() + b.bev_radius() + 0.3
            });
            if clear {
                clutter.push(b);
                break;
            }
        }
    }

    let blockers: Vec<(usize, Box3D)> = objects
        .iter()
        .chain(clutter.iter())
        .copied()
        .enumerate()
        .collect();

    let mut surface: Vec<Surface> = Vec::new();
    let mut object_hits = vec![0usize; objects.len()];
    for (i, b) in objects.iter().enumerate() {
        let range = b.center[0].hypot(b.center[1]).max(1.0);
        let n = (spec.lidar_points_per_object as f64 * (10.0 / range).clamp(0.3, 1.0)).round();
        for p in sample_box_surface(b, n as usize, &mut rng) {
            if !occluded(p, &blockers, Some(i)) {
                object_hits[i] += 1;
                surface.push(Surface {
                    pos: p,
                    source: Source::Object(i),
                });
            }
        }
    }
    let n_obj = objects.len();
    for (k, b) in clutter.iter().enumerate() {
        let n = (spec.lidar_points_per_object / 4).max(4) as usize;
        for p in sample_box_surface(b, n, &mut rng) {
            if !occluded(p, &blockers, Some(n_obj + k)) {
                surface.push(Surface {
                    pos: p,
                    source: Source::Clutter,
                });
            }
        }
    }
    let area = (spec.x_range[1] - spec.x_range[0]) * (spec.y_range[1] - spec.y_range[0]);
    let n_ground = (spec.lidar_background_density * area).round() as usize;
    for _ in 0..n_ground {
        let p = [
            rng.gen_range(spec.x_range[0]..spec.x_range[1]),
            rng.gen_range(spec.y_range[0]..spec.y_range[1]),
            spec.ground_z + 0.02 * rng.gen_range(-1.0..1.0),
        ];
        let inside = blockers.iter().any(|(_, b)| b.contains_bev(p[0], p[1]));
        if !inside && !occluded(p, &blockers, None) {
            surface.push(Surface {
                pos: p,
                source: Source::Ground,
            });
        }
    }
    for s in surface.iter_mut() {
        s.pos = s.pos.map(q);
    }

    // Lidar features.
    let mut lidar_pts = Vec::with_capacity(surface.len() * 4);
    for s in &surface {
        let intensity = match s.source {
            Source::Object(i) => prior(objects[i].class).intensity + rng.gen_range(-0.1..0.1),
            Source::Clutter => 0.45 + rng.gen_range(-0.15..0.15),
            Source::Ground => 0.1 + rng.gen_range(-0.05..0.05),
        };
        lidar_pts.extend_from_slice(&s.pos);
        lidar_pts.push(q(intensity.clamp(0.0, 1.0)));
    }

    // Per-object radar attributes.
    let obj_rcs: Vec<f64> = objects
        .iter()
        .map(|b| {
            let p = prior(b.class);
            Normal::new(p.rcs_mean, p.rcs_sd).unwrap().sample(&mut rng)
        })
        .collect();
    let obj_vel: Vec<[f64; 2]> = objects
        .iter()
        .map(|b| {
            let speed = rng.gen_range(0.0..prior(b.class).speed);
            let heading = b.yaw + if rng.gen_bool(0.5) { 0.0 } else { PI };
            [speed * heading.cos(), speed * heading.sin()]
        })
        .collect();

    let n_radar = (spec.radar_density_ratio * surface.len() as f64).floor() as usize;
    let n_ghost = (spec.ghost_rate * n_radar as f64).round() as usize;
    let n_true = n_radar - n_ghost;

    // Weighted sampling without replacement (exponential keys).
    let mut keyed: Vec<(f64, usize)> = surface
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = match s.source {
                Source::Object(o) => prior(objects[o].class).radar_weight,
                Source::Clutter => 1.0,
                Source::Ground => 0.3,
            };
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed.iter().take(n_true).map(|k| k.1).collect();
    chosen.sort_unstable();

    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    let mut radar_rows: Vec<[f64; 5]> = Vec::with_capacity(n_radar);
    for &i in &chosen {
        let s = &surface[i];
        let n = truncated_noise(spec.radar_noise_sigma, &mut rng);
        let pos = [s.pos[0] + n[0], s.pos[1] + n[1], s.pos[2] + n[2]];
        let (rcs, vel) = match s.source {
            Source::Object(o) => (obj_rcs[o] + unit_normal.sample(&mut rng), obj_vel[o]),
            Source::Clutter => (-3.0 + 2.0 * unit_normal.sample(&mut rng), [0.0, 0.0]),
            Source::Ground => (-10.0 + 3.0 * unit_normal.sample(&mut rng), [0.0, 0.0]),
        };
        let r = pos[0].hypot(pos[1]).max(1e-6);
        let doppler = (vel[0] * pos[0] + vel[1] * pos[1]) / r;
        radar_rows.push([pos[0], pos[1], pos[2], rcs, doppler]);
    }
    if n_ghost > 0 && !radar_rows.is_empty() {
        // Reflector: vertical plane through a random point with random orientation.
        let px = rng.gen_range(spec.x_range[0]..spec.x_range[1]);
        let py = rng.gen_range(spec.y_range[0]..spec.y_range[1]);
        let ang = rng.gen_range(0.0..PI);
        let nrm = [ang.cos(), ang.sin()];
        let n_real = radar_rows.len();
        for _ in 0..n_ghost {
            let src = radar_rows[rng.gen_range(0..n_real)];
            let d = (src[0] - px) * nrm[0] + (src[1] - py) * nrm[1];
            radar_rows.push([
                src[0] - 2.0 * d * nrm[0],
                src[1] - 2.0 * d * nrm[1],
                src[2],
                src[3] - 5.0,
                src[4],
            ]);
        }
    }
    let radar_pts: Vec<f64> = radar_rows.iter().flatten().map(|&v| q(v)).collect();

    let labels: Vec<Box3D> = objects
        .iter()
        .zip(&object_hits)
        .filter(|(_, &hits)| hits > 0)
        .map(|(b, _)| *b)
        .collect();

    let mut lidar = PointCloudFrame::new(frame_id, Modality::Lidar, lidar_pts)?;
    let mut radar = PointCloudFrame::new(frame_id, Modality::Radar, radar_pts)?;
    lidar.labels = Some(labels.clone());
    radar.labels = Some(labels.clone());
    Ok(Scene {
        lidar,
        radar,
        labels,
        surface: surface.iter().map(|s| s.pos).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lidar.to_bytes(), b.lidar.to_bytes());
        let c = generate_scene(&spec, 4).unwrap();
        assert_ne!(a.lidar, c.lidar);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SceneSpec::default();
        s.radar_density_ratio = 0.2;
        assert!(generate_scene(&s, 0).is_err());
        let mut s = SceneSpec::default();
        s.lidar_background_density = 0.0;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.ghost_rate = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn labels_are_shared_and_valid() {
        let scene = generate_scene(&SceneSpec::default(), 11).unwrap();
        assert_eq!(scene.lidar.labels, scene.radar.labels);
        assert!(!scene.labels.is_empty());
        for b in &scene.labels {
            b.validate().unwrap();
            assert!(b.center[0] > 0.0 && b.center[0] < 25.6);
        }
    }

    #[test]
    fn segment_occlusion() {
        let b = Box3D::new([5.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0, ObjectClass::Car);
        assert!(segment_hits(&b, [10.0, 0.0]));
        assert!(!segment_hits(&b, [10.0, 8.0]));
        assert!(!segment_hits(&b, [3.0, 0.0]));
    }
}
