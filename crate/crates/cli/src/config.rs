//! Experiment configuration: one versioned TOML document covering every stage.

use std::path::Path;

use codegram_core::model::{ModelConfig, Structure};
use codegram_core::sampler::SamplerConfig;
use codegram_core::seed::derive_seed;
use codegram_core::selector::ScavConfig;
use codegram_core::synth::SyntheticTaskSpec;
use codegram_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub structure: Structure,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            structure: Structure::Seq2seq,
            hidden: 32,
            depth: 2,
            heads: 2,
            encoder_depth: 1,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Examples generated by `gen-data` and `pipeline`.
    pub count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { count: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub novelty_kernel: usize,
    pub sample_rate: f64,
    /// Test examples sampled by `pipeline`; 0 means the whole split.
    pub limit: usize,
    pub beams: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            novelty_kernel: 16,
            sample_rate: 44_100.0,
            limit: 0,
            beams: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Global seed; component seeds are derived from it by label.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub scav: ScavConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataSection::default(),
            task: SyntheticTaskSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            scav: ScavConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Validation(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills derived fields: per-component seeds from the global seed and
    /// the dimensions that follow from the task. Validates the result.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let s = self.seed;
        self.task.seed = derive_seed(s, "task", 0);
        self.train.seed = derive_seed(s, "train", 0);
        self.sampler.seed = derive_seed(s, "sampler", 0);
        self.scav.seed = derive_seed(s, "scav", 0);
        self.scav.video_dim = self.task.clip_dim;
        self.scav.audio_dim = self.task.aux_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    fn validate(&self) -> Result<(), CliError> {
        self.task.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.scav.validate()?;
        self.model_config().validate()?;
        if self.data.count < 10 {
            return Err(CliError::Validation("data.count must be >= 10".into()));
        }
        if self.eval.beams < 1 {
            return Err(CliError::Validation("eval.beams must be >= 1".into()));
        }
        if self.task.aux_frames < self.eval.novelty_kernel {
            return Err(CliError::Validation(format!(
                "task.aux_frames ({}) must cover eval.novelty_kernel ({})",
                self.task.aux_frames, self.eval.novelty_kernel
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            structure: m.structure,
            spec: codegram_core::CodebookSpec {
                levels: self.task.levels,
                vocab_size: self.task.vocab_size,
                embed_dim: m.hidden,
                ..Default::default()
            },
            hidden: m.hidden,
            depth: m.depth,
            heads: m.heads,
            encoder_depth: m.encoder_depth,
            mlp_ratio: m.mlp_ratio,
            max_len: self.task.len,
            max_cond_len: self.task.clip_frames,
            streams: self.task.stream_specs(),
            aux_dim: self.task.aux_dim,
            seed: derive_seed(self.seed, "model", 0),
        }
    }
}
