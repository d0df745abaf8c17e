//! Optimizer, checkpoints, training loops, the ablation runner and run configuration.

mod ablation;
mod checkpoint;
mod config;
mod heatmap;
mod loops;
mod optim;

pub use ablation::{
    run_ablation, run_variant, supervision_variants, unlabeled_sweep_variants, AblationRow,
    AblationSetup, AblationTable, Variant,
};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use config::{AblationConfig, AblationGrid, DataConfig, PathsConfig, RunConfig};
pub use heatmap::{foreground_mask, heatmap_contrast, heatmap_csv, student_heatmap};
pub use loops::{
    distill_student, pretrain_teacher, Detector, StageConfig, StepLog, TrainLog, STUDENT_KIND,
    TEACHER_KIND,
};
pub use optim::{lr_schedule, AdamW, OptimizerSpec};
