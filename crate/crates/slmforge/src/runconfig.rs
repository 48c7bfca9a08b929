//! Layered run configuration: a TOML file with one section per pipeline
//! stage, overridden by command-line flags, and echoed into every output
//! directory as `effective_config.json` so a run can be reproduced from
//! its artifacts alone.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("config {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Total vocabulary size including the 256 byte tokens and controls.
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: 4096 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub block_size: usize,
    pub val_fraction: f64,
    /// Shuffle seed for the train/val split.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            block_size: 64,
            val_fraction: 0.1,
            seed: 1337,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelConfig::desk(4096).into()
    }
}

impl From<ModelConfig> for ModelSection {
    fn from(c: ModelConfig) -> Self {
        ModelSection {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            vocab_size: c.vocab_size,
            context_len: c.context_len,
            tie_embeddings: c.tie_embeddings,
            dropout: c.dropout,
        }
    }
}

impl From<ModelSection> for ModelConfig {
    fn from(s: ModelSection) -> Self {
        ModelConfig {
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_model: s.d_model,
            vocab_size: s.vocab_size,
            context_len: s.context_len,
            tie_embeddings: s.tie_embeddings,
            dropout: s.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub warmup_iters: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub eval_batches: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainConfig::desk().into()
    }
}

impl From<TrainConfig> for TrainSection {
    fn from(c: TrainConfig) -> Self {
        TrainSection {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_iters: c.max_iters,
            warmup_iters: c.warmup_iters,
            min_lr: c.min_lr,
            weight_decay: c.weight_decay,
            grad_clip: c.grad_clip,
            seed: c.seed,
            eval_interval: c.eval_interval,
            eval_batches: c.eval_batches,
        }
    }
}

impl From<TrainSection> for TrainConfig {
    fn from(s: TrainSection) -> Self {
        TrainConfig {
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            max_iters: s.max_iters,
            warmup_iters: s.warmup_iters,
            min_lr: s.min_lr,
            weight_decay: s.weight_decay,
            grad_clip: s.grad_clip,
            seed: s.seed,
            eval_interval: s.eval_interval,
            eval_batches: s.eval_batches,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            temperature: 0.8,
            top_k: 50,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    /// "grammar" or "http".
    pub teacher: String,
    /// Chat-completion endpoint URL for the http teacher. The credential
    /// comes from the SLMFORGE_TEACHER_KEY environment variable only.
    pub endpoint: String,
    pub n_per_intent: usize,
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            teacher: "grammar".into(),
            endpoint: String::new(),
            n_per_intent: 4,
            concurrency: 4,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// "mock" or "http".
    pub judge: String,
    pub endpoint: String,
    pub concurrency: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            judge: "mock".into(),
            endpoint: String::new(),
            concurrency: 4,
        }
    }
}

/// Every stage's settings in one document. Absent sections and absent
/// keys take the defaults above; unknown keys are rejected so typos fail
/// loudly instead of silently running defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Loads the file when given, defaults otherwise.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        if !path.exists() {
            return Err(ConfigError::NotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ConfigError::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// One seed flag steers every stage that draws randomness.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
        self.distill.seed = seed;
    }

    /// Echoes the merged configuration into an output directory.
    pub fn write_effective(&self, out_dir: &Path) -> Result<PathBuf, ConfigError> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join("effective_config.json");
        let mut json = serde_json::to_string_pretty(self).expect("config serializes");
        json.push('\n');
        fs::write(&path, json)?;
        Ok(path)
    }
}
