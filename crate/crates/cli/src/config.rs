use std::fs;
use std::path::{Path, PathBuf};

use csr_core::data::SyntheticConfig;
use csr_core::eval::{ORACLE_ALPHA, ORACLE_THRESHOLD};
use csr_core::pipeline::{RefineConfig, StageConfigs};
use csr_core::{ContrastiveConfig, TaskHeadConfig, TrainConfig};
use csr_service::{ModelPaths, ServiceConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything one pipeline run needs. Relative paths resolve against the config file's
/// directory (the working directory when no file is given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Replaces the generator seed and every stage seed.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
    pub concept_head: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub task_head: TaskHeadConfig,
    /// Rules applied by `refine --auto`.
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: PathsConfig::default(),
            synthetic: SyntheticConfig::default(),
            concept_head: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
            task_head: TaskHeadConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alpha: f64,
    pub indecision_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: ORACLE_ALPHA, indecision_threshold: ORACLE_THRESHOLD }
    }
}

impl PipelineConfig {
    /// Reads and validates a TOML file; absent path means defaults.
    pub fn load(path: Option<&Path>) -> Result<(Self, PathBuf), CliError> {
        let Some(path) = path else {
            return Ok((Self::default(), PathBuf::from(".")));
        };
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        Ok((cfg, base))
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: csr_core::CsrError| CliError::Config(e.to_string());
        self.synthetic.validate().map_err(wrap)?;
        self.contrastive.validate().map_err(wrap)?;
        self.concept_head.pooling.validate().map_err(wrap)?;
        self.refine.validate().map_err(wrap)?;
        if !(0.0..1.0).contains(&self.eval.alpha) {
            return Err(CliError::Config(format!("eval.alpha must lie in [0, 1), got {}", self.eval.alpha)));
        }
        if !(0.0..=1.0).contains(&self.eval.indecision_threshold) {
            return Err(CliError::Config(format!(
                "eval.indecision_threshold must lie in [0, 1], got {}",
                self.eval.indecision_threshold
            )));
        }
        self.service.validate().map_err(CliError::Config)
    }

    pub fn stages(&self) -> StageConfigs {
        StageConfigs {
            concept_head: self.concept_head.clone(),
            contrastive: self.contrastive.clone(),
            task_head: self.task_head.clone(),
            refine: None,
        }
        .with_seed(self.seed)
    }
}

/// Where every artifact of a run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data_dir: PathBuf,
    pub manifest: PathBuf,
    pub concept_head: PathBuf,
    pub vectors: PathBuf,
    pub projector: PathBuf,
    pub atlas: PathBuf,
    pub task_head: PathBuf,
    pub atlas_edits: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    pub fn new(paths: &PathsConfig, base: &Path) -> Self {
        let data_dir = base.join(&paths.data_dir);
        let ck = base.join(&paths.checkpoint_dir);
        Self {
            manifest: data_dir.join("manifest.json"),
            data_dir,
            concept_head: ck.join("concept_head.json"),
            vectors: ck.join("vectors.jsonl"),
            projector: ck.join("projector.json"),
            atlas: ck.join("atlas.json"),
            task_head: ck.join("task_head.json"),
            atlas_edits: ck.join("atlas_edits.json"),
            reports: ck.join("reports"),
        }
    }

    pub fn model_paths(&self) -> ModelPaths {
        ModelPaths { projector: self.projector.clone(), atlas: self.atlas.clone(), task_head: self.task_head.clone() }
    }
}
