//! Anchor-based detection head: prediction, decoding with rotated NMS, target
//! assignment and the focal / smooth-L1 training loss.

mod anchors;
mod coder;
mod nms;

pub use anchors::{
    assign_targets, slot, AnchorConfig, AnchorGrid, AnchorLabel, AnchorTargets, ClassAnchor,
    ANCHORS_PER_CELL, ANCHOR_YAWS,
};
pub use coder::{decode, encode};
pub use nms::{nms, rotated_nms};

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, DenseTarget, FocalParams, SmoothL1Params, Tape, Var};
use crate::boxes::{Detection, ObjectClass};
use crate::error::{ensure, Result};
use crate::params::{small_normal, Bound, ParamStore};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CODE_SIZE: usize = 7;

/// Prior probability used to initialize the classification bias.
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Keep candidates with confidence strictly above this.
    pub conf_min: f64,
    pub nms_iou: f64,
    /// Candidates per class entering NMS.
    pub pre_nms_top: usize,
    /// Detections kept per frame after NMS.
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_min: 0.05,
            nms_iou: 0.1,
            pre_nms_top: 100,
            max_detections: 50,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.conf_min) && (0.0..=1.0).contains(&self.nms_iou),
            Validation,
            "decode thresholds must lie in [0, 1]"
        );
        ensure!(
            self.pre_nms_top > 0 && self.max_detections > 0,
            Validation,
            "decode candidate limits must be positive"
        );
        Ok(())
    }
}

/// Head output nodes: `cls` is `[N, A*K, H, W]`, `reg` is `[N, A*7, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub reg: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub prefix: String,
    pub in_channels: usize,
}

impl DetectionHead {
    pub fn new(prefix: &str, in_channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_channels,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let a = ANCHORS_PER_CELL;
        let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let mut p = ParamStore::new();
        p.insert(
            self.name("cls.w"),
            small_normal(&[a * NUM_CLASSES, self.in_channels, 1, 1], 0.01, rng),
        );
        p.insert(self.name("cls.b"), Tensor::full(&[a * NUM_CLASSES], bias));
        p.insert(
            self.name("reg.w"),
            small_normal(&[a * CODE_SIZE, self.in_channels, 1, 1], 0.01, rng),
        );
        p.insert(self.name("reg.b"), Tensor::zeros(&[a * CODE_SIZE]));
        p
    }

    pub fn predict(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<HeadOutput> {
        let s = tape.value(x).shape();
        ensure!(
            s.len() == 4 && s[1] == self.in_channels,
            Contract,
            "head expects [N, {}, H, W], got {:?}",
            self.in_channels,
            s
        );
        let cls = tape.conv(
            x,
            p.get(&self.name("cls.w"))?,
            Some(p.get(&self.name("cls.b"))?),
            [1, 1, 1],
        )?;
        let reg = tape.conv(
            x,
            p.get(&self.name("reg.w"))?,
            Some(p.get(&self.name("reg.b"))?),
            [1, 1, 1],
        )?;
        Ok(HeadOutput { cls, reg })
    }
}

/// Decode one frame's head output (`cls` `[A*K, H, W]`, `reg` `[A*7, H, W]`) into
/// detections sorted by descending confidence.
pub fn decode_nms(
    cls: &Tensor,
    reg: &Tensor,
    anchors: &AnchorGrid,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let cells = anchors.cells();
    let n_anchor = anchors.len() / cells.max(1);
    ensure!(
        cls.len() == n_anchor * NUM_CLASSES * cells && reg.len() == n_anchor * CODE_SIZE * cells,
        Contract,
        "head output {:?}/{:?} does not match {} anchors",
        cls.shape(),
        reg.shape(),
        anchors.len()
    );
    let (cd, rd) = (cls.data(), reg.data());
    let mut per_class: [Vec<(f64, usize, Detection)>; NUM_CLASSES] = Default::default();
    for i in 0..anchors.len() {
        let (a, cell) = anchors.split_index(i);
        let (mut best_k, mut best_z) = (0, f64::NEG_INFINITY);
        for k in 0..NUM_CLASSES {
            let z = cd[(a * NUM_CLASSES + k) * cells + cell];
            if z > best_z {
                best_z = z;
                best_k = k;
            }
        }
        let conf = sigmoid(best_z);
        if !(conf > cfg.conf_min) {
            continue;
        }
        let mut d: [f64; CODE_SIZE] =
            std::array::from_fn(|j| rd[(a * CODE_SIZE + j) * cells + cell]);
        for v in &mut d[3..6] {
            *v = v.clamp(-4.0, 4.0);
        }
        if d.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let mut b = decode(&d, &anchors.boxes[i]);
        b.class = ObjectClass::from_index(best_k).expect("class index");
        per_class[best_k].push((conf, i, b.with_score(conf)));
    }
    let mut out = Vec::new();
    for mut cands in per_class {
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        cands.truncate(cfg.pre_nms_top);
        let boxes: Vec<Detection> = cands.into_iter().map(|c| c.2).collect();
        out.extend(nms(&boxes, cfg.nms_iou));
    }
    out.sort_by(|x, y| y.score.unwrap_or(0.0).total_cmp(&x.score.unwrap_or(0.0)));
    out.truncate(cfg.max_detections);
    Ok(out)
}

/// Dense focal and regression targets for a batch of per-frame anchor targets.
pub fn dense_targets(
    anchors: &AnchorGrid,
    targets: &[AnchorTargets],
) -> Result<(Rc<DenseTarget>, Rc<DenseTarget>)> {
    let cells = anchors.cells();
    let n_anchor = anchors.len() / cells.max(1);
    let per_cls = n_anchor * NUM_CLASSES * cells;
    let per_reg = n_anchor * CODE_SIZE * cells;
    let n = targets.len();
    let mut ct = vec![0.0; n * per_cls];
    let mut cw = vec![0.0; n * per_cls];
    let mut rt = vec![0.0; n * per_reg];
    let mut rw = vec![0.0; n * per_reg];
    let mut positives = 0usize;
    for (b, t) in targets.iter().enumerate() {
        ensure!(
            t.labels.len() == anchors.len(),
            Contract,
            "targets for {} anchors, grid has {}",
            t.labels.len(),
            anchors.len()
        );
        for (i, label) in t.labels.iter().enumerate() {
            let (a, cell) = anchors.split_index(i);
            let cls_at = |k: usize| b * per_cls + (a * NUM_CLASSES + k) * cells + cell;
            match label {
                AnchorLabel::Ignore => {}
                AnchorLabel::Negative => (0..NUM_CLASSES).for_each(|k| cw[cls_at(k)] = 1.0),
                AnchorLabel::Positive(_) => {
                    positives += 1;
                    let k = anchors.boxes[i].class.index();
                    (0..NUM_CLASSES).for_each(|kk| cw[cls_at(kk)] = 1.0);
                    ct[cls_at(k)] = 1.0;
                    for j in 0..CODE_SIZE {
                        let idx = b * per_reg + (a * CODE_SIZE + j) * cells + cell;
                        rt[idx] = t.deltas[i][j];
                        rw[idx] = 1.0;
                    }
                }
            }
        }
    }
    let normalizer = positives.max(1) as f64;
    Ok((
        Rc::new(DenseTarget {
            target: ct,
            weight: cw,
            normalizer,
        }),
        Rc::new(DenseTarget {
            target: rt,
            weight: rw,
            normalizer,
        }),
    ))
}

/// Focal classification loss and smooth-L1 regression loss.
pub fn gt_loss(
    tape: &mut Tape,
    out: &HeadOutput,
    anchors: &AnchorGrid,
    targets: &[AnchorTargets],
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let (ct, rt) = dense_targets(anchors, targets)?;
    let l_cls = tape.focal_loss(
        out.cls,
        ct,
        FocalParams {
            gamma: cfg.focal_gamma,
            alpha: cfg.focal_alpha,
        },
    )?;
    let l_reg = tape.smooth_l1(
        out.reg,
        rt,
        SmoothL1Params {
            beta: cfg.smooth_l1_beta,
            code_size: CODE_SIZE,
        },
    )?;
    Ok((l_cls, l_reg))
}
