//! Voxel grids and mean-feature voxelization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scene::{Modality, PointCloudFrame};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelGridSpec {
    /// `[x, y, z]` lower bounds in meters.
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points_lidar: usize,
    pub max_points_radar: usize,
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            range_min: [0.0, -12.8, -3.0],
            range_max: [25.6, 12.8, 2.0],
            voxel_size: [0.8, 0.8, 1.25],
            max_points_lidar: 5,
            max_points_radar: 10,
        }
    }
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (lo, hi, s) = (
                self.range_min[axis],
                self.range_max[axis],
                self.voxel_size[axis],
            );
            ensure!(
                lo.is_finite() && hi.is_finite() && hi > lo,
                Validation,
                "grid range on axis {axis} must satisfy max > min, got [{lo}, {hi}]"
            );
            ensure!(
                s.is_finite() && s > 0.0,
                Validation,
                "voxel size on axis {axis} must be > 0"
            );
            let n = (hi - lo) / s;
            ensure!(
                (n - n.round()).abs() < 1e-6 && n.round() >= 1.0,
                Validation,
                "extent {} on axis {axis} is not a multiple of voxel size {s}",
                hi - lo
            );
        }
        ensure!(
            self.max_points_lidar > 0 && self.max_points_radar > 0,
            Validation,
            "max points per voxel must be positive"
        );
        Ok(())
    }

    /// Cells per axis as `[nx, ny, nz]`.
    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| {
            ((self.range_max[a] - self.range_min[a]) / self.voxel_size[a]).round() as usize
        })
    }

    /// BEV size `(H, W) = (ny, nx)` before any stride.
    pub fn bev_dims(&self) -> (usize, usize) {
        let [nx, ny, _] = self.dims();
        (ny, nx)
    }

    pub fn max_points(&self, modality: Modality) -> usize {
        match modality {
            Modality::Lidar => self.max_points_lidar,
            Modality::Radar => self.max_points_radar,
        }
    }

    /// Cell `(x, y, z)` holding point `p`, or `None` outside the range.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut out = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let i = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor() as usize;
            out[a] = i.min(dims[a] - 1);
        }
        Some(out)
    }

    /// Metric center of cell `(x, y, z)`.
    pub fn cell_center(&self, cell: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.range_min[a] + (cell[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Center of BEV cell `(row, col)` on a map downsampled by `stride`.
    pub fn bev_cell_center(&self, row: usize, col: usize, stride: usize) -> (f64, f64) {
        let s = stride as f64;
        (
            self.range_min[0] + (col as f64 + 0.5) * self.voxel_size[0] * s,
            self.range_min[1] + (row as f64 + 0.5) * self.voxel_size[1] * s,
        )
    }
}

/// Non-empty voxels of one frame, sorted by `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSet {
    pub modality: Modality,
    /// `[z, y, x]` cell indices.
    pub coords: Vec<[usize; 3]>,
    /// `coords.len() × F` mean point features.
    pub features: Vec<f64>,
    pub counts: Vec<usize>,
}

impl VoxelSet {
    pub fn empty(modality: Modality) -> Self {
        Self {
            modality,
            coords: Vec::new(),
            features: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.modality.num_features()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let f = self.num_features();
        &self.features[i * f..(i + 1) * f]
    }
}

pub fn voxelize(frame: &PointCloudFrame, grid: &VoxelGridSpec) -> Result<VoxelSet> {
    grid.validate()?;
    let f = frame.modality.num_features();
    let cap = grid.max_points(frame.modality);
    let [nx, ny, _] = grid.dims();
    let mut cells: BTreeMap<usize, ([usize; 3], Vec<f64>, usize)> = BTreeMap::new();
    for p in frame.iter_points() {
        let Some([x, y, z]) = grid.cell_of([p[0], p[1], p[2]]) else {
            continue;
        };
        let key = (z * ny + y) * nx + x;
        let entry = cells
            .entry(key)
            .or_insert_with(|| ([z, y, x], vec![0.0; f], 0));
        if entry.2 == cap {
            continue;
        }
        entry.1.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        entry.2 += 1;
    }
    let mut out = VoxelSet::empty(frame.modality);
    for (coord, sum, count) in cells.into_values() {
        out.coords.push(coord);
        out.features.extend(sum.iter().map(|s| s / count as f64));
        out.counts.push(count);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lidar(points: Vec<f64>) -> PointCloudFrame {
        PointCloudFrame::new(0, Modality::Lidar, points).unwrap()
    }

    #[test]
    fn default_grid_dims() {
        let g = VoxelGridSpec::default();
        g.validate().unwrap();
        assert_eq!(g.dims(), [32, 32, 4]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let g = VoxelGridSpec {
            voxel_size: [0.7, 0.8, 1.25],
            ..Default::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn singleton_and_mean() {
        let g = VoxelGridSpec::default();
        let v = voxelize(&lidar(vec![0.1, -12.7, -2.9, 0.5]), &g).unwrap();
        assert_eq!(v.coords, vec![[0, 0, 0]]);
        assert_eq!(v.feature(0), &[0.1, -12.7, -2.9, 0.5]);
        let v = voxelize(&lidar(vec![0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.6]), &g).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v.feature(0)[3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_dropped() {
        let g = VoxelGridSpec::default();
        let v = voxelize(&lidar(vec![25.7, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]), &g).unwrap();
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn cap_truncates_in_input_order() {
        let g = VoxelGridSpec {
            max_points_lidar: 2,
            ..Default::default()
        };
        let pts = vec![0.1, 0.1, 0.1, 0.0, 0.1, 0.1, 0.1, 1.0, 0.1, 0.1, 0.1, 0.9];
        let v = voxelize(&lidar(pts), &g).unwrap();
        assert_eq!(v.counts, vec![2]);
        assert!((v.feature(0)[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sorted_by_zyx() {
        let g = VoxelGridSpec::default();
        let pts = vec![
            5.0, 0.0, 1.0, 0.0, 1.0, 5.0, -2.0, 0.0, 9.0, -5.0, -2.0, 0.0,
        ];
        let v = voxelize(&lidar(pts), &g).unwrap();
        let mut sorted = v.coords.clone();
        sorted.sort();
        assert_eq!(v.coords, sorted);
    }
}
