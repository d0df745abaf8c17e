//! Voxelization, the dense voxel encoder and the multi-scale BEV block.

mod encoder;
mod multiscale;
mod voxel;

pub use encoder::{Encoder, EncoderConfig};
pub use multiscale::{Multiscale, MultiscaleConfig};
pub use voxel::{voxelize, VoxelGridSpec, VoxelSet};

use crate::scene::Modality;
use crate::tensor::Tensor;

/// One `C × H × W` BEV map with its grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureMap {
    pub data: Tensor,
    pub grid: VoxelGridSpec,
    pub modality: Modality,
    /// Downsampling relative to the voxel grid.
    pub stride: usize,
}

impl BevFeatureMap {
    /// Item `n` of a batched `[N, C, H, W]` tensor.
    pub fn from_batch(
        batch: &Tensor,
        n: usize,
        grid: VoxelGridSpec,
        modality: Modality,
        stride: usize,
    ) -> Self {
        Self {
            data: batch.batch_item(n),
            grid,
            modality,
            stride,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Max absolute activation over channels, row-major `H × W`.
    pub fn channel_max_abs(&self) -> Vec<f64> {
        let (c, hw) = (self.channels(), self.height() * self.width());
        let d = self.data.data();
        (0..hw)
            .map(|i| (0..c).map(|ch| d[ch * hw + i].abs()).fold(0.0, f64::max))
            .collect()
    }
}
