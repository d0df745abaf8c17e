//! Anchor configuration, anchor grids and target assignment.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::coder::encode;
use crate::backbone::VoxelGridSpec;
use crate::boxes::{Box3D, ObjectClass};
use crate::error::{ensure, Result};
use crate::eval::bev_iou_fast;

/// Anchor yaws, shared by every class.
pub const ANCHOR_YAWS: [f64; 2] = [0.0, FRAC_PI_2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAnchor {
    /// `(l, w, h)` in meters.
    pub size: [f64; 3],
    /// Anchor center height.
    pub z_center: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub car: ClassAnchor,
    pub pedestrian: ClassAnchor,
    pub cyclist: ClassAnchor,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            car: ClassAnchor {
                size: [3.9, 1.6, 1.56],
                z_center: -0.82,
                pos_iou: 0.6,
                neg_iou: 0.45,
            },
            pedestrian: ClassAnchor {
                size: [0.8, 0.6, 1.73],
                z_center: -0.735,
                pos_iou: 0.35,
                neg_iou: 0.2,
            },
            cyclist: ClassAnchor {
                size: [1.76, 0.6, 1.73],
                z_center: -0.735,
                pos_iou: 0.35,
                neg_iou: 0.2,
            },
        }
    }
}

impl AnchorConfig {
    pub fn class(&self, c: ObjectClass) -> &ClassAnchor {
        match c {
            ObjectClass::Car => &self.car,
            ObjectClass::Pedestrian => &self.pedestrian,
            ObjectClass::Cyclist => &self.cyclist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in ObjectClass::ALL {
            let a = self.class(c);
            ensure!(
                a.size.iter().all(|&s| s.is_finite() && s > 0.0),
                Validation,
                "{} anchor sizes must be > 0",
                c.name()
            );
            ensure!(
                0.0 <= a.neg_iou && a.neg_iou < a.pos_iou && a.pos_iou <= 1.0,
                Validation,
                "{} anchor thresholds need 0 <= neg < pos <= 1",
                c.name()
            );
            ensure!(
                a.z_center.is_finite(),
                Validation,
                "{} anchor z must be finite",
                c.name()
            );
        }
        Ok(())
    }
}

/// Number of anchors per BEV cell.
pub const ANCHORS_PER_CELL: usize = 3 * ANCHOR_YAWS.len();

/// Class and yaw of per-cell anchor slot `a`.
pub fn slot(a: usize) -> (ObjectClass, f64) {
    (
        ObjectClass::from_index(a / ANCHOR_YAWS.len()).expect("anchor slot in range"),
        ANCHOR_YAWS[a % ANCHOR_YAWS.len()],
    )
}

/// All anchors of a BEV map, indexed `(a * H + row) * W + col`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<Box3D>,
}

impl AnchorGrid {
    pub fn new(cfg: &AnchorConfig, grid: &VoxelGridSpec, stride: usize) -> Self {
        let (h0, w0) = grid.bev_dims();
        let (height, width) = (h0 / stride, w0 / stride);
        let mut boxes = Vec::with_capacity(ANCHORS_PER_CELL * height * width);
        for a in 0..ANCHORS_PER_CELL {
            let (class, yaw) = slot(a);
            let ca = cfg.class(class);
            for row in 0..height {
                for col in 0..width {
                    let (x, y) = grid.bev_cell_center(row, col, stride);
                    boxes.push(Box3D::new([x, y, ca.z_center], ca.size, yaw, class));
                }
            }
        }
        Self {
            height,
            width,
            boxes,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// `(slot, cell)` of anchor `i`.
    pub fn split_index(&self, i: usize) -> (usize, usize) {
        (i / self.cells(), i % self.cells())
    }
}

/// Assignment outcome for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Ignore,
    Negative,
    /// Index into the box list.
    Positive(usize),
}

/// Per-anchor targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Encoded deltas; meaningful for positive anchors only.
    pub deltas: Vec<[f64; 7]>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }
}

/// Match anchors to boxes of their own class by BEV IoU.
///
/// Positive iff IoU ≥ the class's positive threshold, or the anchor is the
/// first highest-IoU anchor of some box (IoU > 0). Negative iff the best IoU is
/// below the negative threshold. Anything else is ignored.
pub fn assign_targets(
    anchors: &AnchorGrid,
    boxes: &[Box3D],
    cfg: &AnchorConfig,
) -> Result<AnchorTargets> {
    for b in boxes {
        b.validate()?;
    }
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_box: Vec<Option<usize>> = vec![None; n];
    let mut box_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); boxes.len()];
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if b.class != anchor.class {
                continue;
            }
            let dx = anchor.center[0] - b.center[0];
            let dy = anchor.center[1] - b.center[1];
            let reach = anchor.bev_radius() + b.bev_radius();
            if dx * dx + dy * dy >= reach * reach {
                continue;
            }
            let iou = bev_iou_fast(anchor, b);
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_box[i] = Some(j);
            }
            if iou > box_best[j].0 {
                box_best[j] = (iou, Some(i));
            }
        }
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let ca = cfg.class(anchors.boxes[i].class);
        labels.push(match best_box[i] {
            Some(j) if best_iou[i] >= ca.pos_iou => AnchorLabel::Positive(j),
            _ if best_iou[i] < ca.neg_iou => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        });
    }
    for (j, &(_, anchor)) in box_best.iter().enumerate() {
        if let Some(i) = anchor {
            if !matches!(labels[i], AnchorLabel::Positive(_)) {
                labels[i] = AnchorLabel::Positive(j);
            }
        }
    }
    let deltas = labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            AnchorLabel::Positive(j) => encode(&boxes[*j], &anchors.boxes[i]),
            _ => [0.0; 7],
        })
        .collect();
    Ok(AnchorTargets { labels, deltas })
}
