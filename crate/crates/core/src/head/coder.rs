//! Anchor-relative box encoding.

use crate::boxes::{wrap_angle, Box3D};

/// Deltas `(dx, dy, dz, dl, dw, dh, dθ)` of `b` relative to `anchor`.
pub fn encode(b: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let [la, wa, ha] = anchor.size;
    let diag = (la * la + wa * wa).sqrt();
    [
        (b.center[0] - anchor.center[0]) / diag,
        (b.center[1] - anchor.center[1]) / diag,
        (b.center[2] - anchor.center[2]) / ha,
        (b.size[0] / la).ln(),
        (b.size[1] / wa).ln(),
        (b.size[2] / ha).ln(),
        wrap_angle(b.yaw - anchor.yaw),
    ]
}

/// Inverse of [`encode`]; the class is taken from the anchor.
pub fn decode(d: &[f64; 7], anchor: &Box3D) -> Box3D {
    let [la, wa, ha] = anchor.size;
    let diag = (la * la + wa * wa).sqrt();
    Box3D::new(
        [
            anchor.center[0] + d[0] * diag,
            anchor.center[1] + d[1] * diag,
            anchor.center[2] + d[2] * ha,
        ],
        [la * d[3].exp(), wa * d[4].exp(), ha * d[5].exp()],
        anchor.yaw + d[6],
        anchor.class,
    )
}
