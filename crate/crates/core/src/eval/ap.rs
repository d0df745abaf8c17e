//! Interpolated average precision (11- and 40-point) and mAP reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::iou::{bev_iou_fast, iou_3d_fast};
use crate::boxes::{Box3D, Detection, ObjectClass};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    #[serde(rename = "ap11")]
    Ap11,
    #[serde(rename = "ap40")]
    Ap40,
}

impl ApMode {
    /// Recall sample points of the interpolation grid.
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            ApMode::Ap11 => (0..=10).map(|k| k as f64 / 10.0).collect(),
            ApMode::Ap40 => (1..=40).map(|k| k as f64 / 40.0).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

/// Axis-aligned BEV rectangle in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: ApMode,
    /// IoU match thresholds indexed by [`ObjectClass::index`].
    pub iou_thresholds: [f64; 3],
    pub iou_kind: IouKind,
    /// Region filter applied by [`ap_class`]; boxes are kept by center.
    #[serde(default)]
    pub region: Option<Rect>,
    /// Rectangle used for the "corridor" half of a [`MapReport`].
    pub corridor: Rect,
    /// Classes averaged into the mAP.
    pub classes: Vec<ObjectClass>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: ApMode::Ap11,
            iou_thresholds: [0.5, 0.25, 0.25],
            iou_kind: IouKind::ThreeD,
            region: None,
            corridor: Rect {
                x_min: 0.0,
                x_max: 25.0,
                y_min: -4.0,
                y_max: 4.0,
            },
            classes: ObjectClass::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for t in self.iou_thresholds {
            ensure!(
                t > 0.0 && t <= 1.0,
                Validation,
                "IoU threshold {t} outside (0, 1]"
            );
        }
        ensure!(
            !self.classes.is_empty(),
            Validation,
            "evaluation needs at least one class"
        );
        for r in [Some(self.corridor), self.region].into_iter().flatten() {
            ensure!(
                r.x_max > r.x_min && r.y_max > r.y_min,
                Validation,
                "empty evaluation rectangle {:?}",
                r
            );
        }
        Ok(())
    }

    fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self.iou_kind {
            IouKind::Bev => bev_iou_fast(a, b),
            IouKind::ThreeD => iou_3d_fast(a, b),
        }
    }
}

/// Greedy confidence-ordered matching within one frame.
///
/// Returns `(score, is_true_positive)` per kept detection and the number of
/// ground-truth boxes considered.
pub fn match_frame(
    dets: &[Detection],
    gts: &[Box3D],
    class: ObjectClass,
    cfg: &EvalConfig,
    region: Option<Rect>,
) -> (Vec<(f64, bool)>, usize) {
    let keep = |b: &&Box3D| {
        b.class == class && region.is_none_or(|r| r.contains(b.center[0], b.center[1]))
    };
    let gts: Vec<&Box3D> = gts.iter().filter(keep).collect();
    let mut dets: Vec<&Detection> = dets.iter().filter(keep).collect();
    dets.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .partial_cmp(&a.score.unwrap_or(0.0))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let thr = cfg.iou_thresholds[class.index()];
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = cfg.iou(d, gt);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let best = best.map(|(g, _)| g);
        if let Some(g) = best {
            taken[g] = true;
        }
        out.push((d.score.unwrap_or(0.0), best.is_some()));
    }
    (out, gts.len())
}

/// AP in percent from pooled `(score, tp)` pairs and the ground-truth count.
pub fn ap_from_matches(mut matches: Vec<(f64, bool)>, n_gt: usize, mode: ApMode) -> f64 {
    if n_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    matches.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(matches.len());
    for (i, &(_, hit)) in matches.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope: max precision at any recall >= r.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let points = mode.recall_points();
    let mut sum = 0.0;
    for &r in &points {
        if let Some(&(_, p)) = curve.iter().find(|(rec, _)| *rec >= r) {
            sum += p;
        }
    }
    100.0 * sum / points.len() as f64
}

/// Average precision of one class on one frame, in percent.
pub fn ap_class(dets: &[Detection], gts: &[Box3D], class: ObjectClass, cfg: &EvalConfig) -> f64 {
    let (m, n) = match_frame(dets, gts, class, cfg, cfg.region);
    ap_from_matches(m, n, cfg.mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub per_class: BTreeMap<ObjectClass, f64>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub entire: RegionReport,
    pub corridor: RegionReport,
}

fn region_report(
    dets: &BTreeMap<u32, Vec<Detection>>,
    gts: &BTreeMap<u32, Vec<Box3D>>,
    cfg: &EvalConfig,
    region: Option<Rect>,
) -> RegionReport {
    let mut per_class = BTreeMap::new();
    for &class in &cfg.classes {
        let mut pooled = Vec::new();
        let mut n_gt = 0;
        for (id, frame_gts) in gts {
            let (m, n) = match_frame(&dets[id], frame_gts, class, cfg, region);
            pooled.extend(m);
            n_gt += n;
        }
        per_class.insert(class, ap_from_matches(pooled, n_gt, cfg.mode));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    RegionReport { per_class, map }
}

/// Pooled per-class AP and mAP over all frames, for the entire area and the corridor.
pub fn map_eval(
    dets: &BTreeMap<u32, Vec<Detection>>,
    gts: &BTreeMap<u32, Vec<Box3D>>,
    cfg: &EvalConfig,
) -> Result<MapReport> {
    cfg.validate()?;
    ensure!(
        dets.keys().eq(gts.keys()),
        Contract,
        "detection and ground-truth frame sets differ ({} vs {} frames)",
        dets.len(),
        gts.len()
    );
    Ok(MapReport {
        entire: region_report(dets, gts, cfg, None),
        corridor: region_report(dets, gts, cfg, Some(cfg.corridor)),
    })
}

impl MapReport {
    /// Human-readable table, one line per region.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, r) in [("entire", &self.entire), ("corridor", &self.corridor)] {
            let _ = write!(s, "{name:<9}");
            for (c, ap) in &r.per_class {
                let _ = write!(s, " {}={:.2}", c.name(), ap);
            }
            let _ = writeln!(s, " mAP={:.2}", r.map);
        }
        s
    }

    /// `key = value` lines, e.g. `entire.car = 41.890000`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (name, r) in [("entire", &self.entire), ("corridor", &self.corridor)] {
            for (c, ap) in &r.per_class {
                let _ = writeln!(s, "{name}.{} = {:.6}", c.name(), ap);
            }
            let _ = writeln!(s, "{name}.map = {:.6}", r.map);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [4.0, 2.0, 1.5], 0.0, ObjectClass::Car)
    }

    #[test]
    fn perfect_detector_scores_100() {
        let gts = vec![car(5.0, 0.0), car(15.0, 3.0)];
        let dets: Vec<_> = gts.iter().map(|b| b.with_score(0.9)).collect();
        let cfg = EvalConfig::default();
        assert_eq!(ap_class(&dets, &gts, ObjectClass::Car, &cfg), 100.0);
    }

    #[test]
    fn no_detections_scores_zero() {
        let cfg = EvalConfig::default();
        assert_eq!(ap_class(&[], &[car(1.0, 1.0)], ObjectClass::Car, &cfg), 0.0);
    }

    #[test]
    fn gt_matched_once() {
        let gts = vec![car(5.0, 0.0)];
        let dets = vec![car(5.0, 0.0).with_score(0.9), car(5.0, 0.0).with_score(0.8)];
        let cfg = EvalConfig::default();
        let (m, n) = match_frame(&dets, &gts, ObjectClass::Car, &cfg, None);
        assert_eq!(n, 1);
        assert_eq!(m, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn mismatched_frames_rejected() {
        let mut d = BTreeMap::new();
        d.insert(1, vec![]);
        let mut g = BTreeMap::new();
        g.insert(2, vec![]);
        assert!(map_eval(&d, &g, &EvalConfig::default()).is_err());
    }
}
