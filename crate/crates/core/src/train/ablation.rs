//! Ablation runner: train several student variants over several seeds and tabulate mAP.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loops::{distill_student, Detector, StageConfig};
use super::optim::OptimizerSpec;
use crate::distill::{DistillConfig, FrfdAdapters};
use crate::error::{ensure, Result};
use crate::eval::{EvalConfig, MapReport};
use crate::model::{ModelConfig, Student};
use crate::scene::FramePair;

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub distill: DistillConfig,
    /// Train on the labeled frames (label-stripped unless `use_gt`).
    pub labeled_frames: bool,
    /// Number of unlabeled frames, taken from the front of the pool.
    pub unlabeled_frames: usize,
}

impl Variant {
    fn new(name: &str, gt: bool, ssod: bool, frfd: Option<FrfdAdapters>, lrfd: bool) -> Self {
        let base = DistillConfig::default();
        Self {
            name: name.to_string(),
            distill: DistillConfig {
                use_gt: gt,
                use_ssod: ssod,
                alpha: if lrfd { base.alpha } else { 0.0 },
                beta: if frfd.is_some() { base.beta } else { 0.0 },
                frfd_adapters: frfd.unwrap_or_default(),
                ..base
            },
            labeled_frames: true,
            unlabeled_frames: 0,
        }
    }

    /// Ground truth only, no teacher involvement.
    pub fn gt_only() -> Self {
        Self::new("gt", true, false, None, false)
    }

    /// Pseudo-labels plus both feature losses, no ground truth.
    pub fn full() -> Self {
        Self::new("sckd", false, true, Some(FrfdAdapters::Two), true)
    }

    /// Rename and choose the training frames.
    pub fn with_unlabeled(mut self, name: &str, labeled_frames: bool, unlabeled: usize) -> Self {
        self.name = name.to_string();
        self.labeled_frames = labeled_frames;
        self.unlabeled_frames = unlabeled;
        self
    }
}

/// The nine supervision/distillation combinations (a) to (i).
pub fn supervision_variants() -> Vec<Variant> {
    use FrfdAdapters::{One, Two};
    vec![
        Variant::new("a_gt", true, false, None, false),
        Variant::new("b_ssod", false, true, None, false),
        Variant::new("c_gt_ssod", true, true, None, false),
        Variant::new("d_gt_ssod_frfd1", true, true, Some(One), false),
        Variant::new("e_ssod_frfd1", false, true, Some(One), false),
        Variant::new("f_ssod_frfd", false, true, Some(Two), false),
        Variant::new("g_ssod_lrfd", false, true, None, true),
        Variant::new("h_gt_ssod_frfd_lrfd", true, true, Some(Two), true),
        Variant::new("i_sckd", false, true, Some(Two), true),
    ]
}

/// Unlabeled-volume sweep: the labeled frames alone (stripped), then with `extra` unlabeled frames.
pub fn unlabeled_sweep_variants(extra: usize) -> Vec<Variant> {
    vec![
        Variant::full().with_unlabeled("sckd", true, 0),
        Variant::full().with_unlabeled("sckd_plus", true, extra),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<MapReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    pub fn median_entire(&self) -> f64 {
        median(self.reports.iter().map(|r| r.entire.map).collect())
    }

    pub fn median_corridor(&self) -> f64 {
        median(self.reports.iter().map(|r| r.corridor.map).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Whitespace-aligned table: per-class median APs and mAP for both regions.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<22} {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} {:>7}\n",
            "variant", "car", "ped", "cyc", "mAP", "car", "ped", "cyc", "mAP"
        );
        for r in &self.rows {
            out.push_str(&format!("{:<22}", r.name));
            for (i, region) in ["entire", "corridor"].iter().enumerate() {
                if i == 1 {
                    out.push_str(" |");
                }
                let pick =
                    |f: &dyn Fn(&MapReport) -> f64| median(r.reports.iter().map(f).collect());
                for class in crate::boxes::ObjectClass::ALL {
                    let v = pick(&|m: &MapReport| {
                        let rr = if *region == "entire" {
                            &m.entire
                        } else {
                            &m.corridor
                        };
                        rr.per_class.get(&class).copied().unwrap_or(0.0)
                    });
                    out.push_str(&format!(" {v:>7.2}"));
                }
                let v = if i == 0 {
                    r.median_entire()
                } else {
                    r.median_corridor()
                };
                out.push_str(&format!(" {v:>7.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Everything a variant run needs besides the variant itself.
pub struct AblationSetup<'a> {
    pub model: &'a ModelConfig,
    pub teacher: &'a Checkpoint,
    pub optimizer: &'a OptimizerSpec,
    pub stage: &'a StageConfig,
    pub eval: &'a EvalConfig,
    pub labeled: &'a [FramePair],
    pub unlabeled: &'a [FramePair],
    pub val: &'a [FramePair],
}

/// Train and evaluate one variant with one seed.
pub fn run_variant(
    setup: &AblationSetup,
    v: &Variant,
    seed: u64,
) -> Result<(Checkpoint, MapReport)> {
    ensure!(
        v.unlabeled_frames <= setup.unlabeled.len(),
        Config,
        "variant {} wants {} unlabeled frames, pool has {}",
        v.name,
        v.unlabeled_frames,
        setup.unlabeled.len()
    );
    let labeled: &[FramePair] = if v.labeled_frames { setup.labeled } else { &[] };
    let (ck, _) = distill_student(
        setup.model,
        setup.teacher,
        &v.distill,
        setup.optimizer,
        setup.stage,
        labeled,
        &setup.unlabeled[..v.unlabeled_frames],
        seed,
    )?;
    let student = Student::new(setup.model, &v.distill);
    let report = Detector::Student(&student, &ck.params).evaluate(setup.val, setup.eval)?;
    Ok((ck, report))
}

pub fn run_ablation(
    setup: &AblationSetup,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for v in variants {
        let mut reports = Vec::with_capacity(seeds.len());
        for &s in seeds {
            reports.push(run_variant(setup, v, s)?.1);
        }
        table.rows.push(AblationRow {
            name: v.name.clone(),
            seeds: seeds.to_vec(),
            reports,
        });
    }
    Ok(table)
}
