use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mergeforge::datasets::SuiteSpec;
use mergeforge::eval::{GridSpec, DEFAULT_BARRIER_GRID, DEFAULT_TALL_LAMBDAS, DEFAULT_VALIDATION_FRACTION};
use mergeforge::merge::{MergeConfig, ALIGN_MAX_SWEEPS};
use mergeforge::network::{ArchitectureDescriptor, TrainConfig};
use mergeforge::repair::DEFAULT_EPSILON;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![512; 6],
            layer_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub max_sweeps: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            max_sweeps: ALIGN_MAX_SWEEPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepairConfig {
    pub epsilon: f64,
    /// Leading training samples per task used for statistics; all when absent.
    pub stats_samples: Option<usize>,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig {
            epsilon: DEFAULT_EPSILON,
            stats_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Share of each test split held out for hyperparameter search.
    pub validation_fraction: f64,
    pub barrier_grid: usize,
    pub landscape: GridSpec,
    /// λ grid for search; the default grid for the method and task count when absent.
    pub lambda_grid: Option<Vec<f64>>,
    pub tall_lambda_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            barrier_grid: DEFAULT_BARRIER_GRID,
            landscape: GridSpec::default(),
            lambda_grid: None,
            tall_lambda_grid: DEFAULT_TALL_LAMBDAS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteSpec,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default = "TrainConfig::pretrain_default")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub merge: MergeConfig,
    #[serde(default)]
    pub repair: RepairConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.pretrain.validate().context("pretrain")?;
        self.finetune.validate().context("finetune")?;
        if self.arch.hidden.is_empty() {
            bail!("arch.hidden must list at least one layer");
        }
        if !(self.repair.epsilon >= 0.0 && self.repair.epsilon.is_finite()) {
            bail!("repair.epsilon must be a finite non-negative number");
        }
        if self.repair.stats_samples == Some(0) {
            bail!("repair.stats_samples must be positive");
        }
        if self.eval.barrier_grid == 0 {
            bail!("eval.barrier_grid must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> mergeforge::Result<ArchitectureDescriptor> {
        ArchitectureDescriptor::mlp(
            self.suite.in_dim,
            &self.arch.hidden,
            self.suite.classes_per_task,
            self.arch.layer_norm,
        )
    }

    /// Pretty JSON, the form written as the resolved config of a run.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
