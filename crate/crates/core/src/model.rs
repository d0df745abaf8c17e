//! Teacher (Lidar + radar fusion) and student (radar only) networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    voxelize, Encoder, EncoderConfig, Multiscale, MultiscaleConfig, VoxelGridSpec, VoxelSet,
};
use crate::boxes::Detection;
use crate::distill::{Adapter, DistillConfig, FrfdAdapters};
use crate::error::Result;
use crate::fusion::{AdaptiveFusion, FusionConfig, FusionOutput, GateState};
use crate::head::{
    decode_nms, AnchorConfig, AnchorGrid, DecodeConfig, DetectionHead, HeadOutput, LossConfig,
};
use crate::params::{Bound, ParamStore};
use crate::scene::{FramePair, Modality};

/// Architecture and decoding settings shared by teacher and student.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub encoder: EncoderConfig,
    pub multiscale: MultiscaleConfig,
    pub anchors: AnchorConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.encoder.validate(&self.grid)?;
        let (h, w) = self.bev_dims();
        Multiscale::new("", 1, self.multiscale).validate(h, w)?;
        self.anchors.validate()?;
        self.fusion.validate()?;
        self.decode.validate()
    }

    /// Encoder output size.
    pub fn bev_dims(&self) -> (usize, usize) {
        let (h, w) = self.grid.bev_dims();
        (h / self.encoder.stride, w / self.encoder.stride)
    }

    /// Total downsampling from voxel grid to head.
    pub fn head_stride(&self) -> usize {
        self.encoder.stride * self.multiscale.stride
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        AnchorGrid::new(&self.anchors, &self.grid, self.head_stride())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("model config serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    fn encoder(&self, prefix: &str, m: Modality) -> Encoder {
        Encoder::new(prefix, m, self.grid, self.encoder)
    }
}

/// Voxelized inputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVoxels {
    pub lidar: VoxelSet,
    pub radar: VoxelSet,
}

impl FrameVoxels {
    pub fn from_pair(pair: &FramePair, grid: &VoxelGridSpec) -> Result<Self> {
        Ok(Self {
            lidar: voxelize(&pair.lidar, grid)?,
            radar: voxelize(&pair.radar, grid)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherOutput {
    /// Lidar and radar encoder maps `[N, C, H, W]`.
    pub f_l: Var,
    pub f_r: Var,
    pub fusion: FusionOutput,
    pub head: HeadOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub cfg: ModelConfig,
    pub lidar_encoder: Encoder,
    pub radar_encoder: Encoder,
    pub fusion: AdaptiveFusion,
    pub neck: Multiscale,
    pub head: DetectionHead,
}

impl Teacher {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.encoder.out_channels;
        let neck = Multiscale::new("teacher.neck", 2 * c, cfg.multiscale);
        let head = DetectionHead::new("teacher.head", neck.out_channels());
        Self {
            cfg: cfg.clone(),
            lidar_encoder: cfg.encoder("teacher.lidar_encoder", Modality::Lidar),
            radar_encoder: cfg.encoder("teacher.radar_encoder", Modality::Radar),
            fusion: AdaptiveFusion::new("teacher.fusion", c, cfg.fusion),
            neck,
            head,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.lidar_encoder.init(&mut rng);
        p.extend(self.radar_encoder.init(&mut rng));
        p.extend(self.fusion.init(&mut rng));
        p.extend(self.neck.init(&mut rng));
        p.extend(self.head.init(&mut rng));
        p
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        frames: &[&FrameVoxels],
        gates: &[GateState],
        training: bool,
    ) -> Result<TeacherOutput> {
        let lidar: Vec<&VoxelSet> = frames.iter().map(|f| &f.lidar).collect();
        let radar: Vec<&VoxelSet> = frames.iter().map(|f| &f.radar).collect();
        let f_l = self.lidar_encoder.forward(tape, p, &lidar)?;
        let f_r = self.radar_encoder.forward(tape, p, &radar)?;
        let fusion = self.fusion.forward(tape, p, f_l, f_r, gates, training)?;
        let x = self.neck.forward(tape, p, fusion.fused)?;
        let head = self.head.predict(tape, p, x)?;
        Ok(TeacherOutput {
            f_l,
            f_r,
            fusion,
            head,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StudentOutput {
    /// Radar encoder map `[N, C, H, W]`.
    pub f_r: Var,
    pub head: HeadOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub neck: Multiscale,
    pub head: DetectionHead,
    /// Lidar-feature adapter.
    pub adapter_l: Adapter,
    /// Fusion-feature adapters: one C→2C, or Lidar-half and radar-half C→C.
    pub adapters_f: Vec<Adapter>,
}

impl Student {
    pub fn new(cfg: &ModelConfig, distill: &DistillConfig) -> Self {
        let c = cfg.encoder.out_channels;
        let k = distill.adapter_kernel;
        let neck = Multiscale::new("student.neck", c, cfg.multiscale);
        let head = DetectionHead::new("student.head", neck.out_channels());
        let adapters_f = match distill.frfd_adapters {
            FrfdAdapters::One => vec![Adapter::new("student.adapter_f", c, 2 * c, k)],
            FrfdAdapters::Two => vec![
                Adapter::new("student.adapter_fl", c, c, k),
                Adapter::new("student.adapter_fr", c, c, k),
            ],
        };
        Self {
            cfg: cfg.clone(),
            encoder: cfg.encoder("student.encoder", Modality::Radar),
            neck,
            head,
            adapter_l: Adapter::new("student.adapter_l", c, c, k),
            adapters_f,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.encoder.init(&mut rng);
        p.extend(self.neck.init(&mut rng));
        p.extend(self.head.init(&mut rng));
        p.extend(self.adapter_l.init_identity());
        for a in &self.adapters_f {
            p.extend(a.init_identity());
        }
        p
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        radar: &[&VoxelSet],
    ) -> Result<StudentOutput> {
        let f_r = self.encoder.forward(tape, p, radar)?;
        let x = self.neck.forward(tape, p, f_r)?;
        let head = self.head.predict(tape, p, x)?;
        Ok(StudentOutput { f_r, head })
    }
}

/// Decode every batch item of a head output.
pub fn decode_batch(
    tape: &Tape,
    head: &HeadOutput,
    anchors: &AnchorGrid,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    let cls = tape.value(head.cls);
    let reg = tape.value(head.reg);
    (0..cls.shape()[0])
        .map(|n| decode_nms(&cls.batch_item(n), &reg.batch_item(n), anchors, cfg))
        .collect()
}
