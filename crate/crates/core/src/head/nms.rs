//! Greedy rotated non-maximum suppression.

use crate::boxes::Detection;
use crate::eval::bev_iou_fast;

/// Greedy NMS over boxes already sorted by descending score.
///
/// A box is dropped when its BEV IoU with a kept box is at least `iou_thresh`.
pub fn nms(sorted: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for b in sorted {
        if kept.iter().all(|k| bev_iou_fast(k, b) < iou_thresh) {
            kept.push(*b);
        }
    }
    kept
}

/// Per-class NMS of arbitrary-order detections; output sorted by descending score.
pub fn rotated_nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for class in crate::boxes::ObjectClass::ALL {
        let mut c: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
        c.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
        out.extend(nms(&c, iou_thresh));
    }
    out.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    out
}
