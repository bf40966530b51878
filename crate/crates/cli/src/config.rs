//! Run configuration: a JSON or TOML file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use molprompt_core::evaluation::PropertySpec;
use molprompt_model::align::AlignConfig;
use molprompt_model::guidance::{GuidanceConfig, OptimizationTask};
use molprompt_model::trainer::TrainConfig;
use molprompt_model::DenoiserConfig;

use crate::error::{CliError, Result};

pub const CHECKPOINT_ROOT_ENV: &str = "MOLPROMPT_CHECKPOINT_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Filled in from the subcommand; a config file naming a different
    /// command is rejected.
    pub command: Option<String>,
    pub corpus: Option<PathBuf>,
    /// Diffusion checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    pub align_checkpoint: Option<PathBuf>,
    /// Default parent of both checkpoints (`diffusion/`, `align/`).
    pub checkpoint_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// When set, also replaces the seeds of the nested configs.
    pub seed: Option<u64>,
    pub workers: usize,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub text: TextConfig,
    pub guidance: GuidanceConfig,
    pub optimize: OptimizeConfig,
    pub sample: SampleConfig,
    pub evaluate: EvaluateConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            corpus: None,
            checkpoint: None,
            align_checkpoint: None,
            checkpoint_root: None,
            out: None,
            seed: None,
            workers: 1,
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            align: AlignConfig::default(),
            text: TextConfig::default(),
            guidance: GuidanceConfig::default(),
            optimize: OptimizeConfig::default(),
            sample: SampleConfig::default(),
            evaluate: EvaluateConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Caption template file, one template per line; built-in set if unset.
    pub templates: Option<PathBuf>,
    pub compound_captions: bool,
    /// JSON-lines `{"text", "embedding"}` table used instead of the word encoder.
    pub external_embeddings: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { templates: None, compound_captions: true, external_embeddings: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    /// Molecule files or directories of them.
    pub molecules: Vec<PathBuf>,
    pub prompt: String,
    pub task: OptimizationTask,
    pub n_runs: usize,
    /// Properties scored for the hit columns of the manifest.
    pub specs: Vec<PropertySpec>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            molecules: Vec::new(),
            prompt: String::new(),
            task: OptimizationTask::Flexible { n_extra: 0 },
            n_runs: 1,
            specs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    /// Fixed size; drawn from the training size histogram when unset.
    pub n_atoms: Option<usize>,
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n: 16, n_atoms: None, batch_size: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Directory of input molecules.
    pub inputs: Option<PathBuf>,
    /// One directory per run; outputs are matched to inputs by file name.
    pub outputs: Vec<PathBuf>,
    pub specs: Vec<PropertySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub conformers: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { conformers: 4 }
    }
}

impl RunConfig {
    /// Parses `.toml` files as TOML and anything else as JSON.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|x| x == "toml") {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Pushes the top-level seed into the nested configs.
    pub fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.align.seed = s;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn root_child(&self, name: &str) -> Option<PathBuf> {
        self.checkpoint_root.as_ref().map(|r| r.join(name))
    }

    pub fn diffusion_dir(&self) -> Result<PathBuf> {
        self.checkpoint
            .clone()
            .or_else(|| self.root_child("diffusion"))
            .ok_or_else(|| CliError::Usage(format!("no diffusion checkpoint: set `checkpoint` or {CHECKPOINT_ROOT_ENV}")))
    }

    pub fn align_dir(&self) -> Result<PathBuf> {
        self.align_checkpoint
            .clone()
            .or_else(|| self.root_child("align"))
            .ok_or_else(|| CliError::Usage(format!("no alignment checkpoint: set `align_checkpoint` or {CHECKPOINT_ROOT_ENV}")))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| CliError::Usage("no output directory: pass --out".into()))
    }

    pub fn corpus_dir(&self) -> Result<PathBuf> {
        let dir = self.corpus.clone().ok_or_else(|| CliError::Usage("no corpus: pass --corpus".into()))?;
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("corpus directory {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), text)?;
        Ok(())
    }
}
