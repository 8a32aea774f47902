//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{build_dataset, dataset_from_scenes, read_scene_dir, Dataset, DatasetConfig};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::interactor::{Fusion, MmtConfig};
use crate::lm::{GenerationConfig, LmConfig, PretrainConfig};

const HELDOUT_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Width of the click Fourier features.
    pub d_pe: usize,
    pub hidden: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { d_pe: 32, hidden: 128 }
    }
}

/// Language model dimensions; the vocabulary size comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmDims {
    pub layers: usize,
    pub heads: usize,
    pub d_lm: usize,
    pub hidden: usize,
    pub max_positions: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_lm: 64,
            hidden: 128,
            max_positions: 128,
        }
    }
}

impl LmDims {
    pub fn with_vocab(&self, vocab: usize) -> LmConfig {
        LmConfig {
            layers: self.layers,
            heads: self.heads,
            d_lm: self.d_lm,
            hidden: self.hidden,
            vocab,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub total_steps: usize,
    /// Evaluate on the training set every this many steps (0 disables).
    pub eval_every: usize,
    /// Save a checkpoint every this many steps (0 saves only the last).
    pub checkpoint_every: usize,
    /// Scene encoder warm-up steps run before it is frozen.
    pub encoder_warmup_steps: usize,
    pub encoder_warmup_lr: f64,
    /// Check frozen parameter bytes after every step.
    pub check_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 0.1,
            batch: 16,
            total_steps: 5000,
            eval_every: 500,
            checkpoint_every: 0,
            encoder_warmup_steps: 64,
            encoder_warmup_lr: 1e-3,
            check_frozen: cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of scene JSON files; the dataset is regenerated from
    /// `data` when absent.
    pub scenes: Option<PathBuf>,
    /// Where checkpoints and reports go.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub mmt: MmtConfig,
    pub lm: LmDims,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            mmt: MmtConfig::default(),
            lm: LmDims::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale settings tuned so the fixture dataset is memorized within
    /// a CPU-minutes budget.
    pub fn fixture() -> Self {
        let mut c = Self::default();
        c.mmt.layers = 2;
        c.train.lr_max = 1e-3;
        c.train.lr_min = 1e-5;
        c.train.weight_decay = 0.0;
        c.train.batch = 8;
        c.train.total_steps = 1500;
        c.train.eval_every = 0;
        c
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.mmt.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mmt.validate()?;
        self.generation.validate()?;
        if self.encoder.d_enc == 0 || self.prompt.hidden == 0 {
            return Err(Error::Invalid("zero model width".into()));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Invalid("train.batch must be positive".into()));
        }
        if !(t.lr_max > 0.0 && t.lr_min > 0.0 && t.lr_min <= t.lr_max) {
            return Err(Error::Invalid("train learning rates must satisfy 0 < lr_min <= lr_max".into()));
        }
        if self.pretrain.prefix_len != self.mmt.n_queries {
            return Err(Error::Invalid(format!(
                "pretrain.prefix_len {} must equal mmt.n_queries {}",
                self.pretrain.prefix_len, self.mmt.n_queries
            )));
        }
        if let Some(p) = &self.paths.scenes {
            if !p.is_dir() {
                return Err(Error::Invalid(format!("paths.scenes {} is not a directory", p.display())));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Training dataset: the scene files under `paths.scenes` if set,
    /// otherwise freshly generated from `data`.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.paths.scenes {
            Some(dir) => dataset_from_scenes(read_scene_dir(dir)?, &self.data),
            None => build_dataset(&self.data),
        }
    }

    /// A few unseen scenes for monitoring language model pre-training.
    pub fn heldout(&self) -> Result<Dataset> {
        build_dataset(&DatasetConfig {
            scenes: 4,
            seed: self.data.seed.wrapping_add(HELDOUT_SEED_OFFSET),
            ..self.data.clone()
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
