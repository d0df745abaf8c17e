//! Teacher pretraining, student distillation and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::optim::{lr_schedule, AdamW, OptimizerSpec};
use crate::autodiff::{Tape, Var};
use crate::boxes::{Box3D, Detection};
use crate::distill::{
    filter_pseudo_labels, frfd_loss, lrfd_loss, ssod_loss, total_loss, DistillConfig,
};
use crate::error::{ensure, Error, Result};
use crate::eval::{map_eval, EvalConfig, MapReport};
use crate::fusion::{dropout_gate, GateState};
use crate::head::{assign_targets, gt_loss, AnchorLabel, AnchorTargets};
use crate::model::{decode_batch, FrameVoxels, ModelConfig, Student, Teacher};
use crate::params::ParamStore;
use crate::scene::{augment_with, FramePair, Transform};
use crate::tensor::Tensor;

pub const TEACHER_KIND: &str = "teacher";
pub const STUDENT_KIND: &str = "student";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random flip and global scaling of each training pair.
    pub augment: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 4,
            augment: true,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch_size > 0,
            Validation,
            "batch size must be positive"
        );
        Ok(())
    }
}

/// One optimizer step of the progress log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// `(name, value)` loss components, ending with `total`.
    pub losses: Vec<(&'static str, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let total = s.losses.last().map_or(0.0, |l| l.1);
            let e = sums.entry(s.epoch).or_default();
            e.0 += total;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }

    /// Line-oriented text: `epoch step lr name=value ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "epoch={} step={} lr={:.6e}",
                s.epoch, s.step, s.lr
            ));
            for (k, v) in &s.losses {
                out.push_str(&format!(" {k}={v:.6e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Independent RNG streams derived from one run seed.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

struct Prepared {
    voxels: FrameVoxels,
    labels: Option<Vec<Box3D>>,
}

fn prepare(pair: &FramePair, cfg: &ModelConfig, t: Transform) -> Result<Prepared> {
    let labels = pair.labels().map(|l| l.to_vec());
    let (lidar, radar, boxes) = augment_with(
        &pair.lidar,
        &pair.radar,
        labels.as_deref().unwrap_or(&[]),
        t,
    )?;
    let voxels = FrameVoxels::from_pair(&FramePair { lidar, radar }, &cfg.grid)?;
    Ok(Prepared {
        voxels,
        labels: labels.map(|_| boxes),
    })
}

/// Shuffled batches of one epoch, each with a per-frame transform.
fn epoch_batches(
    n: usize,
    stage: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, Transform)>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(stage.batch_size)
        .map(|c| {
            c.iter()
                .map(|&i| {
                    let t = if stage.augment {
                        Transform::sample(rng.gen())
                    } else {
                        Transform::IDENTITY
                    };
                    (i, t)
                })
                .collect()
        })
        .collect()
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn all_ignore(n: usize) -> AnchorTargets {
    AnchorTargets {
        labels: vec![AnchorLabel::Ignore; n],
        deltas: vec![[0.0; 7]; n],
    }
}

/// Train the fusion teacher with the detection loss on its fused-path predictions.
pub fn pretrain_teacher(
    cfg: &ModelConfig,
    opt: &OptimizerSpec,
    stage: &StageConfig,
    labeled: &[FramePair],
    seed: u64,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    opt.validate()?;
    stage.validate()?;
    ensure!(
        !labeled.is_empty(),
        Config,
        "teacher pretraining needs a non-empty labeled split"
    );
    ensure!(
        labeled.iter().all(|p| p.labels().is_some()),
        Config,
        "teacher pretraining frames must carry labels"
    );
    let teacher = Teacher::new(cfg);
    let mut store = teacher.init(stream_seed(seed, INIT_STREAM));
    let anchors = cfg.anchor_grid();
    let mut optimizer = AdamW::new(*opt);
    let mut rng = stream_rng(seed, TRAIN_STREAM);
    let total = stage.epochs * steps_per_epoch(labeled.len(), stage.batch_size);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        for batch in epoch_batches(labeled.len(), stage, &mut rng) {
            let mut prepared = Vec::with_capacity(batch.len());
            let mut gates = Vec::with_capacity(batch.len());
            for &(i, t) in &batch {
                prepared.push(prepare(&labeled[i], cfg, t)?);
                gates.push(dropout_gate(&cfg.fusion, &mut rng, true));
            }
            let frames: Vec<&FrameVoxels> = prepared.iter().map(|p| &p.voxels).collect();
            let targets = prepared
                .iter()
                .map(|p| assign_targets(&anchors, p.labels.as_deref().unwrap_or(&[]), &cfg.anchors))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, true);
            let out = teacher.forward(&mut tape, &bound, &frames, &gates, true)?;
            let (l_cls, l_reg) = gt_loss(&mut tape, &out.head, &anchors, &targets, &cfg.loss)?;
            let loss = tape.combine(&[(l_cls, 1.0), (l_reg, 1.0)])?;
            let mut grads = tape.backward(loss);
            let g = store.gradients(&bound, &mut grads);
            let lr = lr_schedule(step, total, opt)?;
            optimizer.update(&mut store, &g, lr)?;
            teacher
                .fusion
                .update_running_stats(&tape, &out.fusion, &mut store)?;
            log.steps.push(StepLog {
                epoch,
                step,
                lr,
                losses: vec![
                    ("cls", tape.value(l_cls).item()),
                    ("reg", tape.value(l_reg).item()),
                    ("total", tape.value(loss).item()),
                ],
            });
            step += 1;
        }
    }
    Ok((
        Checkpoint {
            kind: TEACHER_KIND.into(),
            epoch: stage.epochs as u64,
            config_hash: cfg.digest(),
            rng: RngState::capture(&rng),
            params: store,
            optimizer_step: optimizer.step,
            adam_m: optimizer.m,
            adam_v: optimizer.v,
        },
        log,
    ))
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).gen()
}

/// Frozen-teacher signals for one batch.
struct TeacherSignals {
    f_l: Tensor,
    fused: Tensor,
    pseudo: Vec<Vec<Box3D>>,
}

fn teacher_signals(
    teacher: &Teacher,
    store: &ParamStore,
    frames: &[&FrameVoxels],
    sigma: f64,
) -> Result<TeacherSignals> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let gates = vec![GateState::OPEN; frames.len()];
    let out = teacher.forward(&mut tape, &bound, frames, &gates, false)?;
    let anchors = teacher.cfg.anchor_grid();
    let dets = decode_batch(&tape, &out.head, &anchors, &teacher.cfg.decode)?;
    Ok(TeacherSignals {
        f_l: tape.value(out.f_l).clone(),
        fused: tape.value(out.fusion.fused).clone(),
        pseudo: dets
            .iter()
            .map(|d| filter_pseudo_labels(d, sigma))
            .collect(),
    })
}

/// Distill a radar-only student from a frozen teacher checkpoint.
///
/// Training frames are `labeled` followed by `unlabeled`. Unless
/// `distill.use_gt` is set every frame is label-stripped first.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    cfg: &ModelConfig,
    teacher_ckpt: &Checkpoint,
    distill: &DistillConfig,
    opt: &OptimizerSpec,
    stage: &StageConfig,
    labeled: &[FramePair],
    unlabeled: &[FramePair],
    seed: u64,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    distill.validate()?;
    opt.validate()?;
    stage.validate()?;
    teacher_ckpt.check(TEACHER_KIND, &cfg.digest())?;
    let teacher = Teacher::new(cfg);
    teacher.init(0).check_layout(&teacher_ckpt.params)?;
    let frames: Vec<FramePair> = labeled
        .iter()
        .chain(unlabeled)
        .map(|p| {
            if distill.use_gt {
                p.clone()
            } else {
                p.stripped()
            }
        })
        .collect();
    ensure!(
        !frames.is_empty(),
        Config,
        "distillation needs at least one training frame"
    );
    let teacher_store = &teacher_ckpt.params;
    let teacher_digest = teacher_store.digest();
    let needs_teacher = distill.use_ssod || distill.uses_lrfd() || distill.uses_frfd();

    let student = Student::new(cfg, distill);
    let mut store = student.init(stream_seed(seed, INIT_STREAM));
    let anchors = cfg.anchor_grid();
    let mut optimizer = AdamW::new(*opt);
    let mut rng = stream_rng(seed, TRAIN_STREAM);
    let total = stage.epochs * steps_per_epoch(frames.len(), stage.batch_size);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        for batch in epoch_batches(frames.len(), stage, &mut rng) {
            let prepared = batch
                .iter()
                .map(|&(i, t)| prepare(&frames[i], cfg, t))
                .collect::<Result<Vec<_>>>()?;
            let voxels: Vec<&FrameVoxels> = prepared.iter().map(|p| &p.voxels).collect();
            let signals = if needs_teacher {
                Some(teacher_signals(
                    &teacher,
                    teacher_store,
                    &voxels,
                    distill.sigma,
                )?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, true);
            let radar: Vec<_> = voxels.iter().map(|v| &v.radar).collect();
            let out = student.forward(&mut tape, &bound, &radar)?;
            let zero = tape.constant(Tensor::scalar(0.0));
            let mut lrfd = zero;
            let mut frfd = zero;
            let mut ssod = zero;
            if let Some(sig) = &signals {
                if distill.uses_lrfd() {
                    let t = tape.constant(sig.f_l.clone());
                    lrfd = lrfd_loss(&mut tape, &bound, out.f_r, t, &student.adapter_l)?;
                }
                if distill.uses_frfd() {
                    let t = tape.constant(sig.fused.clone());
                    frfd = frfd_loss(&mut tape, &bound, out.f_r, t, &student.adapters_f)?;
                }
                if distill.use_ssod {
                    ssod = ssod_loss(
                        &mut tape,
                        &out.head,
                        &sig.pseudo,
                        &anchors,
                        &cfg.anchors,
                        &cfg.loss,
                    )?;
                }
            }
            let gt = if distill.use_gt {
                let targets = prepared
                    .iter()
                    .map(|p| match &p.labels {
                        Some(l) => assign_targets(&anchors, l, &cfg.anchors),
                        None => Ok(all_ignore(anchors.len())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (c, r) = gt_loss(&mut tape, &out.head, &anchors, &targets, &cfg.loss)?;
                Some(tape.combine(&[(c, 1.0), (r, 1.0)])?)
            } else {
                None
            };
            let loss = total_loss(&mut tape, lrfd, frfd, ssod, distill, gt)?;
            let mut grads = tape.backward(loss);
            let g = store.gradients(&bound, &mut grads);
            let lr = lr_schedule(step, total, opt)?;
            optimizer.update(&mut store, &g, lr)?;
            let value = |v: Var| tape.value(v).item();
            let mut losses = vec![
                ("lrfd", value(lrfd)),
                ("frfd", value(frfd)),
                ("ssod", value(ssod)),
            ];
            if let Some(g) = gt {
                losses.push(("gt", value(g)));
            }
            losses.push(("total", value(loss)));
            log.steps.push(StepLog {
                epoch,
                step,
                lr,
                losses,
            });
            step += 1;
        }
    }
    ensure!(
        teacher_ckpt.params.digest() == teacher_digest,
        Contract,
        "teacher parameters changed during distillation"
    );
    Ok((
        Checkpoint {
            kind: STUDENT_KIND.into(),
            epoch: stage.epochs as u64,
            config_hash: cfg.digest(),
            rng: RngState::capture(&rng),
            params: store,
            optimizer_step: optimizer.step,
            adam_m: optimizer.m,
            adam_v: optimizer.v,
        },
        log,
    ))
}

/// A trained network ready for inference.
#[derive(Clone, Copy, Debug)]
pub enum Detector<'a> {
    Teacher(&'a Teacher, &'a ParamStore),
    Student(&'a Student, &'a ParamStore),
}

impl<'a> Detector<'a> {
    fn cfg(&self) -> &ModelConfig {
        match self {
            Detector::Teacher(t, _) => &t.cfg,
            Detector::Student(s, _) => &s.cfg,
        }
    }

    /// Eval-mode detections for each frame, keyed by frame id.
    pub fn detect(
        &self,
        frames: &[FramePair],
        batch_size: usize,
    ) -> Result<BTreeMap<u32, Vec<Detection>>> {
        let cfg = self.cfg();
        let anchors = cfg.anchor_grid();
        let mut out = BTreeMap::new();
        for chunk in frames.chunks(batch_size.max(1)) {
            let voxels = chunk
                .iter()
                .map(|p| FrameVoxels::from_pair(p, &cfg.grid))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FrameVoxels> = voxels.iter().collect();
            let mut tape = Tape::new();
            let head = match self {
                Detector::Teacher(t, store) => {
                    let bound = store.bind(&mut tape, false);
                    let gates = vec![GateState::OPEN; refs.len()];
                    t.forward(&mut tape, &bound, &refs, &gates, false)?.head
                }
                Detector::Student(s, store) => {
                    let bound = store.bind(&mut tape, false);
                    let radar: Vec<_> = refs.iter().map(|v| &v.radar).collect();
                    s.forward(&mut tape, &bound, &radar)?.head
                }
            };
            let dets = decode_batch(&tape, &head, &anchors, &cfg.decode)?;
            for (pair, d) in chunk.iter().zip(dets) {
                out.insert(pair.frame_id(), d);
            }
        }
        Ok(out)
    }

    /// Detect on labeled frames and score against their labels.
    pub fn evaluate(&self, frames: &[FramePair], eval: &EvalConfig) -> Result<MapReport> {
        let mut gts = BTreeMap::new();
        for p in frames {
            let labels = p.labels().ok_or_else(|| {
                Error::Config(format!("evaluation frame {} has no labels", p.frame_id()))
            })?;
            gts.insert(p.frame_id(), labels.to_vec());
        }
        let dets = self.detect(frames, 4)?;
        map_eval(&dets, &gts, eval)
    }
}
