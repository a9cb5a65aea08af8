//! Run configuration and the command implementations behind the binary.
//!
//! A run is fully determined by a [`RunConfig`] (JSON) and its seed. Every
//! field has a default, so `{}` is a valid configuration; unknown keys are
//! rejected. Environment variables are never consulted.

mod commands;

pub use commands::{
    cmd_avg_checkpoints, cmd_infer, cmd_score, cmd_synth, cmd_train, cmd_tune, epoch_checkpoints, exit_code,
    ScoreSummary, SynthSummary, AVERAGED_FILE, CONFIG_FILE, DER_JSON_FILE, DER_TABLE_FILE, HYPOTHESIS_FILE,
    TUNE_FILE,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::pipeline::{PipelineConfig, TuneGrid};
use crate::synthdata::SynthConfig;
use crate::train::TrainConfig;

/// Number of recordings per split produced by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            train: 24,
            dev: 4,
            test: 4,
        }
    }
}

/// Inputs of the individual commands. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training corpus directory (features + `reference.rttm`).
    pub train: Option<PathBuf>,
    /// Validation / tuning corpus directory.
    pub dev: Option<PathBuf>,
    /// Directory of feature files to diarize.
    pub test: Option<PathBuf>,
    /// Starting weights for a further training stage.
    pub init_checkpoint: Option<PathBuf>,
    /// Model used by `tune` and `infer`.
    pub checkpoint: Option<PathBuf>,
    /// Output of `tune`; when set, `infer` uses its best pipeline settings.
    pub tuned: Option<PathBuf>,
    /// Precomputed embedding table; the statistics-pooling embedder otherwise.
    pub embeddings: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub hypothesis: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub grid: TuneGrid,
    /// Template for generated recordings; `recording_id` and `seed` are
    /// replaced per recording, derived from the run seed.
    pub synth: SynthConfig,
    pub corpus: CorpusSizes,
    pub paths: Paths,
    /// Scoring collar in seconds (total width around each reference boundary).
    pub collar: f64,
    /// Number of trailing checkpoints averaged by `avg-checkpoints`.
    pub average_last: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            grid: TuneGrid::default(),
            synth: SynthConfig::default(),
            corpus: CorpusSizes::default(),
            paths: Paths::default(),
            collar: 0.0,
            average_last: 3,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks the sections every command depends on.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        if !(self.collar >= 0.0) {
            return Err(Error::Config("collar must be >= 0".into()));
        }
        if self.average_last == 0 {
            return Err(Error::Config("average_last must be >= 1".into()));
        }
        Ok(())
    }

    /// Returns the path or a config error naming the missing key.
    pub fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
    }
}
