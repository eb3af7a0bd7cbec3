//! TOML experiment description.

use std::fs;
use std::path::{Path, PathBuf};

use npbml_ad::Precision;
use npbml_core::inner::InnerConfig;
use npbml_core::model::{Activation, EncoderSpec, MetaModel, TaskShape};
use npbml_core::outer::MetaConfig;
use npbml_core::params::Variant;
use npbml_core::tasks::{PretrainConfig, TaskFamily, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Name of the fully resolved copy written into every output directory.
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionChoice {
    #[default]
    Single,
    Double,
}

impl From<PrecisionChoice> for Precision {
    fn from(p: PrecisionChoice) -> Self {
        match p {
            PrecisionChoice::Single => Precision::Single,
            PrecisionChoice::Double => Precision::Double,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub precision: PrecisionChoice,
    pub workers: usize,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            precision: PrecisionChoice::Single,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub spec: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer widths from the input to the feature layer. Only the last layer
    /// is warped and adapted; the others stay frozen.
    pub layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub variant: Variant,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks: usize,
    /// Also evaluate the meta-initialization on the same episodes.
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: npbml_core::eval::EVAL_TASKS,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub execution: ExecutionConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub inner: InnerConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| ExpError::io(&path, e))?;
        Ok(path)
    }

    pub fn encoder(&self) -> EncoderSpec {
        EncoderSpec::mlp(&self.model.layers, self.model.activation)
    }

    pub fn build_model(&self) -> Result<MetaModel> {
        Ok(MetaModel::new(
            self.encoder(),
            TaskShape {
                kind: self.task.spec.kind,
                n_way: self.task.spec.n_way,
            },
            self.model.variant,
        )?)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }

    pub fn precision(&self) -> Precision {
        self.execution.precision.into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(ExpError::config(field, reason));
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            );
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct".into());
        }
        if self.execution.workers == 0 {
            return bad("execution.workers", "must be at least 1".into());
        }
        if self.model.layers.len() < 2 {
            return bad("model.layers", "need an input width and at least one layer".into());
        }
        if self.model.layers[0] != self.task.spec.input_dim {
            return bad(
                "model.layers",
                format!(
                    "input width {} does not match task.spec.input_dim {}",
                    self.model.layers[0], self.task.spec.input_dim
                ),
            );
        }
        if self.task.family.kind() != self.task.spec.kind {
            return bad("task.spec.kind", format!("{:?} family needs {:?} tasks", self.task.family.kind(), self.task.family.kind()));
        }
        if self.pretrain.steps > 0 && !matches!(self.task.family, TaskFamily::Clusters(_)) {
            return bad("pretrain.steps", "encoder pretraining needs a classification family".into());
        }
        if self.eval.tasks == 0 {
            return bad("eval.tasks", "must be at least 1".into());
        }
        self.task.family.validate(&self.task.spec).map_err(|e| ExpError::config("task", e.to_string()))?;
        self.inner.validate().map_err(|e| ExpError::config("inner", e.to_string()))?;
        self.meta.validate().map_err(|e| ExpError::config("meta", e.to_string()))?;
        self.build_model().map_err(|e| ExpError::config("model", e.to_string()))?;
        Ok(())
    }
}
