//! Feature distillation (Lidar-to-radar and fusion-to-radar), pseudo-label
//! filtering, output distillation and the overall student objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::boxes::{Box3D, Detection};
use crate::error::{ensure, Result};
use crate::head::{assign_targets, gt_loss, AnchorConfig, AnchorGrid, HeadOutput, LossConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Number of adapters used for fusion-to-radar distillation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrfdAdapters {
    /// One C→2C adapter.
    One,
    /// Separate C→C adapters for the Lidar and radar halves.
    #[default]
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Pseudo-label confidence threshold (strict).
    pub sigma: f64,
    /// Weight of the Lidar-to-radar feature loss.
    pub alpha: f64,
    /// Weight of the fusion-to-radar feature loss.
    pub beta: f64,
    /// Add the ground-truth detection loss (ablation only).
    pub use_gt: bool,
    /// Supervise the head with teacher pseudo-labels.
    pub use_ssod: bool,
    pub frfd_adapters: FrfdAdapters,
    pub adapter_kernel: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            alpha: 3e-4,
            beta: 3e-4,
            use_gt: false,
            use_ssod: true,
            frfd_adapters: FrfdAdapters::Two,
            adapter_kernel: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.sigma),
            Validation,
            "sigma must lie in [0, 1], got {}",
            self.sigma
        );
        ensure!(
            self.alpha >= 0.0
                && self.beta >= 0.0
                && self.alpha.is_finite()
                && self.beta.is_finite(),
            Validation,
            "alpha and beta must be finite and non-negative"
        );
        ensure!(
            self.use_gt || self.use_ssod,
            Validation,
            "the student needs ground truth or pseudo-label supervision"
        );
        ensure!(
            self.adapter_kernel % 2 == 1,
            Validation,
            "adapter kernel must be odd, got {}",
            self.adapter_kernel
        );
        Ok(())
    }

    pub fn uses_lrfd(&self) -> bool {
        self.alpha > 0.0
    }

    pub fn uses_frfd(&self) -> bool {
        self.beta > 0.0
    }
}

/// A single same-padding convolution between BEV feature spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Adapter {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    /// Identity initialization; output channel `o` copies input channel `o mod C_in`.
    pub fn init_identity(&self) -> ParamStore {
        let k = self.kernel;
        let (co, ci) = (self.out_channels, self.in_channels);
        let mut w = Tensor::zeros(&[co, ci, k, k]);
        let center = (k / 2) * k + k / 2;
        for o in 0..co {
            w.data_mut()[(o * ci + o % ci) * k * k + center] = 1.0;
        }
        let mut p = ParamStore::new();
        p.insert(self.name("w"), w);
        p.insert(self.name("b"), Tensor::zeros(&[co]));
        p
    }

    pub fn init_zero(&self) -> ParamStore {
        let k = self.kernel;
        let mut p = ParamStore::new();
        p.insert(
            self.name("w"),
            Tensor::zeros(&[self.out_channels, self.in_channels, k, k]),
        );
        p.insert(self.name("b"), Tensor::zeros(&[self.out_channels]));
        p
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        ensure!(
            s.len() == 4 && s[1] == self.in_channels,
            Contract,
            "adapter expects [N, {}, H, W], got {:?}",
            self.in_channels,
            s
        );
        tape.conv(
            x,
            p.get(&self.name("w"))?,
            Some(p.get(&self.name("b"))?),
            [1, 1, 1],
        )
    }
}

fn check_teacher(tape: &Tape, t: Var) -> Result<()> {
    ensure!(
        !tape.requires_grad(t),
        Contract,
        "teacher features must not carry gradient"
    );
    Ok(())
}

/// MSE between the adapted student map and the teacher Lidar map.
pub fn lrfd_loss(
    tape: &mut Tape,
    p: &Bound,
    f_r_s: Var,
    f_l_t: Var,
    adapter_l: &Adapter,
) -> Result<Var> {
    check_teacher(tape, f_l_t)?;
    let a = adapter_l.forward(tape, p, f_r_s)?;
    tape.mse(a, f_l_t)
}

/// MSE between the adapted student map and the teacher fused map (`2C` channels).
///
/// `adapters` holds either one C→2C adapter or the Lidar and radar C→C adapters.
pub fn frfd_loss(
    tape: &mut Tape,
    p: &Bound,
    f_r_s: Var,
    f_fusion_t: Var,
    adapters: &[Adapter],
) -> Result<Var> {
    check_teacher(tape, f_fusion_t)?;
    ensure!(
        matches!(adapters.len(), 1 | 2),
        Contract,
        "fusion distillation takes one or two adapters, got {}",
        adapters.len()
    );
    let mut parts = Vec::with_capacity(adapters.len());
    for a in adapters {
        parts.push(a.forward(tape, p, f_r_s)?);
    }
    let adapted = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts)?
    };
    tape.mse(adapted, f_fusion_t)
}

/// Teacher detections with confidence strictly above `sigma`, scores removed.
pub fn filter_pseudo_labels(dets: &[Detection], sigma: f64) -> Vec<Box3D> {
    dets.iter()
        .filter(|d| d.score.is_some_and(|s| s > sigma))
        .map(|d| d.without_score())
        .collect()
}

/// Detection loss against pseudo-labels: focal plus smooth-L1.
pub fn ssod_loss(
    tape: &mut Tape,
    out: &HeadOutput,
    pseudo: &[Vec<Box3D>],
    anchors: &AnchorGrid,
    anchor_cfg: &AnchorConfig,
    loss_cfg: &LossConfig,
) -> Result<Var> {
    let targets = pseudo
        .iter()
        .map(|p| assign_targets(anchors, p, anchor_cfg))
        .collect::<Result<Vec<_>>>()?;
    let (c, r) = gt_loss(tape, out, anchors, &targets, loss_cfg)?;
    tape.combine(&[(c, 1.0), (r, 1.0)])
}

/// Weighted objective `α·lrfd + β·frfd + ssod (+ gt)` on plain numbers.
pub fn total_loss_value(
    lrfd: f64,
    frfd: f64,
    ssod: f64,
    cfg: &DistillConfig,
    gt: Option<f64>,
) -> Result<f64> {
    let terms = weighted_terms([lrfd, frfd, ssod], cfg, gt)?;
    Ok(terms.iter().map(|(v, w)| v * w).sum())
}

fn weighted_terms(
    values: [f64; 3],
    cfg: &DistillConfig,
    gt: Option<f64>,
) -> Result<Vec<(f64, f64)>> {
    let names = ["lrfd", "frfd", "ssod", "gt"];
    let all = values.iter().copied().chain(gt);
    for (name, v) in names.iter().zip(all) {
        ensure!(
            v.is_finite() && v >= 0.0,
            Contract,
            "{name} loss must be finite and >= 0, got {v}"
        );
    }
    ensure!(
        gt.is_some() == cfg.use_gt,
        Contract,
        "ground-truth loss must be supplied exactly when use_gt is set"
    );
    let mut terms = vec![
        (values[0], cfg.alpha),
        (values[1], cfg.beta),
        (values[2], 1.0),
    ];
    if let Some(g) = gt {
        terms.push((g, 1.0));
    }
    Ok(terms)
}

/// Tape version of [`total_loss_value`].
pub fn total_loss(
    tape: &mut Tape,
    lrfd: Var,
    frfd: Var,
    ssod: Var,
    cfg: &DistillConfig,
    gt: Option<Var>,
) -> Result<Var> {
    let vals = [lrfd, frfd, ssod].map(|v| tape.value(v).item());
    weighted_terms(vals, cfg, gt.map(|g| tape.value(g).item()))?;
    let mut terms = vec![(lrfd, cfg.alpha), (frfd, cfg.beta), (ssod, 1.0)];
    if let Some(g) = gt {
        terms.push((g, 1.0));
    }
    tape.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::ObjectClass;

    #[test]
    fn total_loss_weights() {
        let cfg = DistillConfig::default();
        let v = total_loss_value(1.0, 1.0, 0.0, &cfg, None).unwrap();
        assert!((v - 6e-4).abs() < 1e-15);
        let zero = DistillConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg
        };
        assert_eq!(total_loss_value(5.0, 7.0, 0.25, &zero, None).unwrap(), 0.25);
        assert!(total_loss_value(-1.0, 0.0, 0.0, &cfg, None).is_err());
    }

    #[test]
    fn filter_is_strict() {
        let b = Box3D::new([0.0; 3], [1.0; 3], 0.0, ObjectClass::Car);
        let dets = [b.with_score(0.05), b.with_score(0.1), b.with_score(0.3)];
        let kept = filter_pseudo_labels(&dets, 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, None);
    }

    #[test]
    fn identity_adapter_gives_zero_lrfd() {
        let ad = Adapter::new("ad", 3, 3, 3);
        let store = ad.init_identity();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = Tensor::new(vec![1, 3, 4, 5], x).unwrap();
        let s = tape.leaf(t.clone(), true);
        let tt = tape.constant(t);
        let l = lrfd_loss(&mut tape, &p, s, tt, &ad).unwrap();
        assert!(tape.value(l).item().abs() < 1e-24);
    }
}
