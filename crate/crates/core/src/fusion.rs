//! Adaptive fusion of Lidar and radar BEV maps with the random modality-dropout gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{he_normal, Bound, ParamStore};
use crate::tensor::Tensor;

/// How many modality weights the weighting branch produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One Lidar/radar weight pair per channel.
    #[default]
    PerChannel,
    /// A single weight pair shared by all channels.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Probability that one modality is dropped at all.
    pub p_drop: f64,
    /// Given a drop, probability that it is the Lidar branch.
    pub p_l_drop: f64,
    #[serde(default)]
    pub weights: WeightMode,
    /// Running-statistics momentum of the batch norm.
    pub bn_momentum: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.2,
            p_l_drop: 0.2,
            weights: WeightMode::PerChannel,
            bn_momentum: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop", self.p_drop), ("p_l_drop", self.p_l_drop)] {
            ensure!(
                (0.0..=1.0).contains(&p),
                Validation,
                "{name} must lie in [0, 1], got {p}"
            );
        }
        ensure!(
            self.bn_momentum > 0.0 && self.bn_momentum <= 1.0,
            Validation,
            "bn_momentum must lie in (0, 1]"
        );
        Ok(())
    }
}

/// Modality-keep gates and the draws that produced them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateState {
    pub g_l: u8,
    pub g_r: u8,
    /// `(p1, p2)`; `None` in eval mode, where no draw happens.
    pub draws: Option<(f64, f64)>,
}

impl GateState {
    pub const OPEN: GateState = GateState {
        g_l: 1,
        g_r: 1,
        draws: None,
    };

    /// Gate decision for given draws.
    pub fn from_draws(p1: f64, p2: f64, cfg: &FusionConfig) -> Self {
        let (g_l, g_r) = if p1 > cfg.p_drop {
            (1, 1)
        } else if p2 <= cfg.p_l_drop {
            (0, 1)
        } else {
            (1, 0)
        };
        GateState {
            g_l,
            g_r,
            draws: Some((p1, p2)),
        }
    }
}

/// Sample the dropout gate. Eval mode returns open gates and leaves `rng` untouched.
pub fn dropout_gate(cfg: &FusionConfig, rng: &mut ChaCha8Rng, training: bool) -> GateState {
    if !training {
        return GateState::OPEN;
    }
    let p1: f64 = rng.gen();
    let p2: f64 = rng.gen();
    GateState::from_draws(p1, p2, cfg)
}

/// Tape nodes produced by [`AdaptiveFusion::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `[N, 2C, H, W]`.
    pub fused: Var,
    /// `[N, C, 1, 1]` (or `[N, 1, 1, 1]` for scalar weights).
    pub w_l: Var,
    pub w_r: Var,
    /// Batch-norm node, for running-statistics updates.
    pub bn: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveFusion {
    pub prefix: String,
    pub channels: usize,
    pub cfg: FusionConfig,
}

impl AdaptiveFusion {
    pub fn new(prefix: &str, channels: usize, cfg: FusionConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            cfg,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    /// Channels of the weighting-branch output: `2C` or 2.
    pub fn logit_channels(&self) -> usize {
        match self.cfg.weights {
            WeightMode::PerChannel => 2 * self.channels,
            WeightMode::Scalar => 2,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let out = self.logit_channels();
        let mut p = ParamStore::new();
        p.insert(
            self.name("conv.w"),
            he_normal(&[out, 2 * self.channels, 1, 1], rng),
        );
        p.insert(self.name("conv.b"), Tensor::zeros(&[out]));
        p.insert(self.name("bn.gamma"), Tensor::full(&[out], 1.0));
        p.insert(self.name("bn.beta"), Tensor::zeros(&[out]));
        p.insert(self.name("bn.running_mean"), Tensor::zeros(&[out]));
        p.insert(self.name("bn.running_var"), Tensor::full(&[out], 1.0));
        p
    }

    /// Modality weights from (already gated) features. Returns `(w_l, w_r, bn)`.
    pub fn adaptive_weights(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f_l: Var,
        f_r: Var,
        training: bool,
    ) -> Result<(Var, Var, Var)> {
        let sl = tape.value(f_l).shape().to_vec();
        let sr = tape.value(f_r).shape().to_vec();
        ensure!(
            sl == sr && sl.len() == 4 && sl[1] == self.channels,
            Contract,
            "fusion inputs must both be [N, {}, H, W], got {:?} and {:?}",
            self.channels,
            sl,
            sr
        );
        let pl = tape.global_avg_pool(f_l);
        let pr = tape.global_avg_pool(f_r);
        let mix = tape.concat(&[pl, pr])?;
        let logits = tape.conv(
            mix,
            p.get(&self.name("conv.w"))?,
            Some(p.get(&self.name("conv.b"))?),
            [1, 1, 1],
        )?;
        let gamma = p.get(&self.name("bn.gamma"))?;
        let beta = p.get(&self.name("bn.beta"))?;
        let bn = if training {
            tape.batch_norm(logits, gamma, beta, None)?
        } else {
            let m = tape
                .value(p.get(&self.name("bn.running_mean"))?)
                .data()
                .to_vec();
            let v = tape
                .value(p.get(&self.name("bn.running_var"))?)
                .data()
                .to_vec();
            tape.batch_norm(logits, gamma, beta, Some((&m, &v)))?
        };
        let w = tape.pair_softmax(bn)?;
        let half = self.logit_channels() / 2;
        let w_l = tape.slice_channels(w, 0, half)?;
        let w_r = tape.slice_channels(w, half, half)?;
        Ok((w_l, w_r, bn))
    }

    /// Gate, weight and concatenate the two modality maps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f_l: Var,
        f_r: Var,
        gates: &[GateState],
        training: bool,
    ) -> Result<FusionOutput> {
        let n = tape.value(f_l).shape().first().copied().unwrap_or(0);
        ensure!(
            gates.len() == n,
            Contract,
            "{} gates for a batch of {n}",
            gates.len()
        );
        let gl: Vec<f64> = gates.iter().map(|g| g.g_l as f64).collect();
        let gr: Vec<f64> = gates.iter().map(|g| g.g_r as f64).collect();
        let f_l = tape.batch_scale(f_l, &gl)?;
        let f_r = tape.batch_scale(f_r, &gr)?;
        let (w_l, w_r, bn) = self.adaptive_weights(tape, p, f_l, f_r, training)?;
        let a = tape.channel_mul(f_l, w_l)?;
        let b = tape.channel_mul(f_r, w_r)?;
        let fused = tape.concat(&[a, b])?;
        Ok(FusionOutput {
            fused,
            w_l,
            w_r,
            bn,
        })
    }

    /// Blend the batch statistics of a training-mode forward into the running buffers.
    pub fn update_running_stats(
        &self,
        tape: &Tape,
        out: &FusionOutput,
        store: &mut ParamStore,
    ) -> Result<()> {
        let Some(stats) = tape.batch_norm_stats(out.bn) else {
            return Ok(());
        };
        let m = self.cfg.bn_momentum;
        for (buf, batch) in [
            ("bn.running_mean", &stats.mean),
            ("bn.running_var", &stats.var),
        ] {
            let t = store.get_mut(&self.name(buf))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(())
    }
}
