//! Run configuration file (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::{supervision_variants, unlabeled_sweep_variants, Variant};
use super::loops::StageConfig;
use super::optim::OptimizerSpec;
use crate::distill::DistillConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::scene::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_labeled: 50,
            n_unlabeled: 200,
            n_val: 50,
        }
    }
}

/// Preset variant grids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    #[default]
    Supervision,
    UnlabeledSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub grid: AblationGrid,
    /// Explicit variants; overrides `grid` when non-empty.
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            grid: AblationGrid::Supervision,
            variants: Vec::new(),
        }
    }
}

impl AblationConfig {
    pub fn resolve(&self, n_unlabeled: usize) -> Vec<Variant> {
        if !self.variants.is_empty() {
            return self.variants.clone();
        }
        match self.grid {
            AblationGrid::Supervision => supervision_variants(),
            AblationGrid::UnlabeledSweep => unlabeled_sweep_variants(n_unlabeled),
        }
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub teacher: StageConfig,
    pub student: StageConfig,
    pub optimizer: OptimizerSpec,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.optimizer.validate()?;
        self.distill.validate()?;
        self.eval.validate()?;
        ensure!(
            !self.ablation.seeds.is_empty(),
            Validation,
            "ablation needs at least one seed"
        );
        for v in &self.ablation.variants {
            v.distill.validate()?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(format!("reading {}", path.display()), e)
            }
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
