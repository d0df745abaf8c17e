//! Dense voxel encoder: scatter, 3-D convolution, z-to-channel collapse, 2-D convolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::voxel::{VoxelGridSpec, VoxelSet};
use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{he_normal, Bound, ParamStore};
use crate::scene::Modality;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels of the 3-D convolution.
    pub mid_channels: usize,
    /// Output channels `C`, shared by every encoder.
    pub out_channels: usize,
    /// Stride of the 2-D convolution.
    pub stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mid_channels: 4,
            out_channels: 16,
            stride: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, grid: &VoxelGridSpec) -> Result<()> {
        ensure!(
            self.mid_channels > 0 && self.out_channels > 0,
            Validation,
            "encoder channel counts must be positive"
        );
        ensure!(
            matches!(self.stride, 1 | 2),
            Validation,
            "encoder stride must be 1 or 2, got {}",
            self.stride
        );
        let (h, w) = grid.bev_dims();
        ensure!(
            h % self.stride == 0 && w % self.stride == 0,
            Validation,
            "BEV dims {h}x{w} not divisible by encoder stride {}",
            self.stride
        );
        Ok(())
    }
}

/// Fixed per-feature scaling of non-coordinate features.
fn feature_scale(modality: Modality) -> &'static [f64] {
    match modality {
        Modality::Lidar => &[1.0],
        Modality::Radar => &[0.1, 0.2],
    }
}

/// One modality's encoder, with parameters under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub prefix: String,
    pub modality: Modality,
    pub grid: VoxelGridSpec,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(prefix: &str, modality: Modality, grid: VoxelGridSpec, cfg: EncoderConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            modality,
            grid,
            cfg,
        }
    }

    /// Input channels: point features plus an occupancy flag.
    pub fn in_channels(&self) -> usize {
        self.modality.num_features() + 1
    }

    pub fn output_dims(&self) -> (usize, usize) {
        let (h, w) = self.grid.bev_dims();
        (h / self.cfg.stride, w / self.cfg.stride)
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let nz = self.grid.dims()[2];
        let (m, c) = (self.cfg.mid_channels, self.cfg.out_channels);
        let mut p = ParamStore::new();
        p.insert(
            self.name("conv3d.w"),
            he_normal(&[m, self.in_channels(), 3, 3, 3], rng),
        );
        p.insert(self.name("conv3d.b"), Tensor::zeros(&[m]));
        p.insert(self.name("conv2d.w"), he_normal(&[c, m * nz, 3, 3], rng));
        p.insert(self.name("conv2d.b"), Tensor::zeros(&[c]));
        p
    }

    /// Scatter voxel sets into a dense `[N, F+1, nz, ny, nx]` input.
    ///
    /// Returns the leaf holding the raw `[V_total, F]` voxel features and the dense tensor.
    /// Coordinates become offsets from the voxel center in voxel units.
    pub fn scatter(&self, tape: &mut Tape, sets: &[&VoxelSet], grad: bool) -> Result<(Var, Var)> {
        let f = self.modality.num_features();
        let [nx, ny, nz] = self.grid.dims();
        let cells = nx * ny * nz;
        let cin = f + 1;
        let scales = feature_scale(self.modality);
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut raw = Vec::with_capacity(total * f);
        let mut index = Vec::with_capacity(total * f);
        let mut scale = Vec::with_capacity(total * f);
        let mut offset = vec![0.0; sets.len() * cin * cells];
        for (b, set) in sets.iter().enumerate() {
            ensure!(
                set.modality == self.modality,
                Contract,
                "{:?} encoder given {:?} voxels",
                self.modality,
                set.modality
            );
            for (i, &[z, y, x]) in set.coords.iter().enumerate() {
                ensure!(
                    z < nz && y < ny && x < nx,
                    Contract,
                    "voxel coordinate ({z}, {y}, {x}) outside grid {nz}x{ny}x{nx}"
                );
                let cell = (z * ny + y) * nx + x;
                let center = self.grid.cell_center([x, y, z]);
                let base = b * cin * cells;
                for (j, &v) in set.feature(i).iter().enumerate() {
                    raw.push(v);
                    index.push(base + j * cells + cell);
                    if j < 3 {
                        let s = 1.0 / self.grid.voxel_size[j];
                        scale.push(s);
                        offset[base + j * cells + cell] = -center[j] * s;
                    } else {
                        scale.push(scales[j - 3]);
                    }
                }
                offset[base + f * cells + cell] = 1.0;
            }
        }
        let shape = [sets.len(), cin, nz, ny, nx];
        let feats = tape.leaf(Tensor::from_parts(vec![total, f], raw), grad);
        let scattered = tape.scatter(feats, index, scale, &shape)?;
        let offset = tape.constant(Tensor::from_parts(shape.to_vec(), offset));
        let dense = tape.add(scattered, offset)?;
        Ok((feats, dense))
    }

    /// Dense input to BEV features `[N, C, H, W]`.
    pub fn forward_dense(&self, tape: &mut Tape, p: &Bound, dense: Var) -> Result<Var> {
        let s = tape.value(dense).shape().to_vec();
        let [nx, ny, nz] = self.grid.dims();
        ensure!(
            s.len() == 5 && s[1] == self.in_channels() && s[2..] == [nz, ny, nx],
            Contract,
            "encoder input shape {:?} does not match grid",
            s
        );
        let h = tape.conv(
            dense,
            p.get(&self.name("conv3d.w"))?,
            Some(p.get(&self.name("conv3d.b"))?),
            [1, 1, 1],
        )?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[s[0], self.cfg.mid_channels * nz, ny, nx])?;
        let st = self.cfg.stride;
        let h = tape.conv(
            h,
            p.get(&self.name("conv2d.w"))?,
            Some(p.get(&self.name("conv2d.b"))?),
            [1, st, st],
        )?;
        Ok(tape.relu(h))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, sets: &[&VoxelSet]) -> Result<Var> {
        let (_, dense) = self.scatter(tape, sets, false)?;
        self.forward_dense(tape, p, dense)
    }
}
