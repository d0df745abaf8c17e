//! Detection metrics: rotated IoU, AP11/AP40, per-region mAP.

mod ap;
mod iou;

pub use ap::{
    ap_class, ap_from_matches, map_eval, match_frame, ApMode, EvalConfig, IouKind, MapReport, Rect,
    RegionReport,
};
pub use iou::{
    bev_intersection, bev_iou_fast, clip_convex, iou_3d, iou_3d_fast, iou_bev, polygon_area,
};
