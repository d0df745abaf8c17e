//! Two-scale 2-D block run on BEV maps ahead of the detection head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{he_normal, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiscaleConfig {
    /// Channels of the full-resolution branch.
    pub channels: usize,
    /// Channels of the half-resolution branch.
    pub down_channels: usize,
    /// Stride of the first convolution.
    pub stride: usize,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            down_channels: 16,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Multiscale {
    pub prefix: String,
    pub in_channels: usize,
    pub cfg: MultiscaleConfig,
}

impl Multiscale {
    pub fn new(prefix: &str, in_channels: usize, cfg: MultiscaleConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_channels,
            cfg,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let s = self.cfg.stride;
        ensure!(
            matches!(s, 1 | 2),
            Validation,
            "multiscale stride must be 1 or 2"
        );
        ensure!(
            self.cfg.channels > 0 && self.cfg.down_channels > 0,
            Validation,
            "multiscale channel counts must be positive"
        );
        ensure!(
            h.is_multiple_of(2 * s) && w.is_multiple_of(2 * s),
            Validation,
            "BEV dims {h}x{w} not divisible by multiscale total stride {}",
            2 * s
        );
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.channels + self.cfg.down_channels
    }

    pub fn total_stride(&self) -> usize {
        self.cfg.stride
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let (c1, c2) = (self.cfg.channels, self.cfg.down_channels);
        let mut p = ParamStore::new();
        for (n, shape) in [
            ("conv1", [c1, self.in_channels, 3, 3]),
            ("conv2", [c1, c1, 3, 3]),
            ("down1", [c2, c1, 3, 3]),
            ("down2", [c2, c2, 3, 3]),
        ] {
            p.insert(self.name(&format!("{n}.w")), he_normal(&shape, rng));
            p.insert(self.name(&format!("{n}.b")), Tensor::zeros(&[shape[0]]));
        }
        p
    }

    fn conv_relu(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        layer: &str,
        stride: usize,
    ) -> Result<Var> {
        let w = p.get(&self.name(&format!("{layer}.w")))?;
        let b = p.get(&self.name(&format!("{layer}.b")))?;
        let y = tape.conv(x, w, Some(b), [1, stride, stride])?;
        Ok(tape.relu(y))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.in_channels,
            Contract,
            "multiscale expects [N, {}, H, W], got {:?}",
            self.in_channels,
            s
        );
        ensure!(
            s[2].is_multiple_of(2 * self.cfg.stride) && s[3].is_multiple_of(2 * self.cfg.stride),
            Contract,
            "multiscale input {:?} not divisible by its strides",
            s
        );
        let a = self.conv_relu(tape, p, x, "conv1", self.cfg.stride)?;
        let a = self.conv_relu(tape, p, a, "conv2", 1)?;
        let d = self.conv_relu(tape, p, a, "down1", 2)?;
        let d = self.conv_relu(tape, p, d, "down2", 1)?;
        let u = tape.upsample2x(d)?;
        tape.concat(&[a, u])
    }
}
