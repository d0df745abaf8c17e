//! Encoder heatmaps and their foreground/background contrast.

use crate::autodiff::Tape;
use crate::backbone::{voxelize, BevFeatureMap};
use crate::boxes::Box3D;
use crate::error::{ensure, Result};
use crate::model::Student;
use crate::params::ParamStore;
use crate::scene::{Modality, PointCloudFrame};

/// Student radar-encoder map for one frame.
pub fn student_heatmap(
    student: &Student,
    store: &ParamStore,
    radar: &PointCloudFrame,
) -> Result<BevFeatureMap> {
    ensure!(
        radar.modality == Modality::Radar,
        Config,
        "student heatmaps need a radar frame, got {:?}",
        radar.modality
    );
    let voxels = voxelize(radar, &student.cfg.grid)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let f = student.encoder.forward(&mut tape, &bound, &[&voxels])?;
    Ok(BevFeatureMap::from_batch(
        tape.value(f),
        0,
        student.cfg.grid,
        Modality::Radar,
        student.cfg.encoder.stride,
    ))
}

/// `H` lines of `W` comma-separated channel-max magnitudes.
pub fn heatmap_csv(map: &BevFeatureMap) -> String {
    let w = map.width();
    let mut out = String::new();
    for row in map.channel_max_abs().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Cells covered by any box: center inside the footprint, or holding the box center.
pub fn foreground_mask(map: &BevFeatureMap, boxes: &[Box3D]) -> Vec<bool> {
    let (h, w) = (map.height(), map.width());
    let mut mask = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let (x, y) = map.grid.bev_cell_center(row, col, map.stride);
            mask[row * w + col] = boxes.iter().any(|b| b.contains_bev(x, y));
        }
    }
    let pitch = [
        map.grid.voxel_size[0] * map.stride as f64,
        map.grid.voxel_size[1] * map.stride as f64,
    ];
    for b in boxes {
        let col = ((b.center[0] - map.grid.range_min[0]) / pitch[0]).floor();
        let row = ((b.center[1] - map.grid.range_min[1]) / pitch[1]).floor();
        if (0.0..w as f64).contains(&col) && (0.0..h as f64).contains(&row) {
            mask[row as usize * w + col as usize] = true;
        }
    }
    mask
}

/// Mean foreground magnitude over mean background magnitude.
///
/// `None` when either region is empty or the background is all zero.
pub fn heatmap_contrast(map: &BevFeatureMap, boxes: &[Box3D]) -> Option<f64> {
    let mask = foreground_mask(map, boxes);
    let mag = map.channel_max_abs();
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (m, v) in mask.iter().zip(&mag) {
        if *m {
            fg += v;
            nf += 1;
        } else {
            bg += v;
            nb += 1;
        }
    }
    if nf == 0 || nb == 0 || bg == 0.0 {
        return None;
    }
    Some((fg / nf as f64) / (bg / nb as f64))
}
