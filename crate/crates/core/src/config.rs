//! Run configuration, read from TOML with one section per stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cpl::{CurriculumConfig, CurriculumMetric, SortDirection};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mcts::{MctsConfig, UcbVariant};
use crate::pairs::BufferMode;
use crate::seed::{self, Stream};
use crate::train::DpoConfig;
use crate::value::{RewardMode, ValueConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stepwise + complete pairs, curriculum order.
    Cpl,
    /// Stepwise + complete pairs, random order.
    Shuffle,
    /// Complete pairs only, random order.
    CompleteOnly,
    /// Per-depth max/min pairs, random order.
    DepthwiseQ,
    /// Stop after fine-tuning on best trajectories.
    SftOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cpl,
        Variant::Shuffle,
        Variant::CompleteOnly,
        Variant::DepthwiseQ,
        Variant::SftOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cpl => "cpl",
            Variant::Shuffle => "shuffle",
            Variant::CompleteOnly => "complete_only",
            Variant::DepthwiseQ => "depthwise_q",
            Variant::SftOnly => "sft_only",
        }
    }

    pub fn buffer_mode(self) -> BufferMode {
        match self {
            Variant::Cpl | Variant::Shuffle | Variant::SftOnly => BufferMode::Both,
            Variant::CompleteOnly => BufferMode::CompleteOnly,
            Variant::DepthwiseQ => BufferMode::Depthwise,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub variant: Variant,
    pub epochs: usize,
    pub num_train_prompts: usize,
    pub num_eval_prompts: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            variant: Variant::Cpl,
            epochs: 2,
            num_train_prompts: 200,
            num_eval_prompts: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsSection {
    pub c_explore: f64,
    pub num_simulations: usize,
    pub max_children: usize,
    pub ucb_variant: UcbVariant,
}

impl Default for MctsSection {
    fn default() -> Self {
        MctsSection {
            c_explore: 1.0,
            num_simulations: 64,
            max_children: 3,
            ucb_variant: UcbVariant::LogRatio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueSection {
    pub gamma: f64,
    pub noise_std: f64,
    pub reward_mode: RewardMode,
}

impl Default for ValueSection {
    fn default() -> Self {
        ValueSection {
            gamma: 0.9,
            noise_std: 0.05,
            reward_mode: RewardMode::PostState,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    pub tau: f64,
    /// Overrides the buffer mode implied by the variant.
    pub mode: Option<BufferMode>,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection { tau: 0.3, mode: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CplSection {
    pub alpha: f64,
    pub sort_direction: SortDirection,
    pub metric: CurriculumMetric,
}

impl Default for CplSection {
    fn default() -> Self {
        CplSection {
            alpha: 0.5,
            sort_direction: SortDirection::Descending,
            metric: CurriculumMetric::Combined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub beta: f64,
    pub batch_size_dpo: usize,
    pub batch_size_sft: usize,
    pub lr_sft: f64,
    pub sft_epochs: usize,
    pub lr_by_epoch: Vec<f64>,
    pub max_grad_norm: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            beta: 0.1,
            batch_size_dpo: 64,
            batch_size_sft: 128,
            lr_sft: 0.5,
            sft_epochs: 1,
            lr_by_epoch: vec![3.0, 1.0],
            max_grad_norm: None,
            checkpoint_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub mcts: MctsSection,
    pub value: ValueSection,
    pub pairs: PairsSection,
    pub cpl: CplSection,
    pub train: TrainSection,
}

impl RunConfig {
    /// Parses TOML; unknown or malformed keys are reported with their path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            key: "<document>".into(),
            message: e.to_string().trim().to_string(),
        })?;
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string().trim().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.into(), message });
        if self.run.epochs == 0 {
            return bad("run.epochs", "must be >= 1".into());
        }
        if self.run.num_train_prompts == 0 {
            return bad("run.num_train_prompts", "must be >= 1".into());
        }
        if self.run.num_eval_prompts == 0 {
            return bad("run.num_eval_prompts", "must be >= 1".into());
        }
        if !(self.pairs.tau > 0.0) {
            return bad("pairs.tau", format!("must be > 0, got {}", self.pairs.tau));
        }
        if !(self.cpl.alpha >= 0.0) {
            return bad("cpl.alpha", format!("must be >= 0, got {}", self.cpl.alpha));
        }
        if self.train.checkpoint_every == 0 {
            return bad("train.checkpoint_every", "must be >= 1".into());
        }
        if self.train.batch_size_sft == 0 {
            return bad("train.batch_size_sft", "must be >= 1".into());
        }
        if !(self.train.lr_sft >= 0.0) {
            return bad("train.lr_sft", "must be >= 0".into());
        }
        self.env.validate().or_else(|e| bad("env", e.to_string()))?;
        self.mcts_config(0).validate().or_else(|e| bad("mcts", e.to_string()))?;
        self.value_config().validate().or_else(|e| bad("value", e.to_string()))?;
        self.dpo_config().validate(self.run.epochs).or_else(|e| bad("train", e.to_string()))?;
        Ok(())
    }

    pub fn buffer_mode(&self) -> BufferMode {
        self.pairs.mode.unwrap_or_else(|| self.run.variant.buffer_mode())
    }

    /// Search config for one prompt, seeded from the master seed and the id.
    pub fn mcts_config(&self, prompt_id: u64) -> MctsConfig {
        MctsConfig {
            c_explore: self.mcts.c_explore,
            num_simulations: self.mcts.num_simulations,
            max_children: self.mcts.max_children,
            ucb_variant: self.mcts.ucb_variant,
            seed: seed::derive(self.run.seed, Stream::Search, prompt_id),
        }
    }

    pub fn value_config(&self) -> ValueConfig {
        ValueConfig {
            gamma: self.value.gamma,
            noise_std: self.value.noise_std,
            seed: seed::derive(self.run.seed, Stream::Value, 0),
            reward_mode: self.value.reward_mode,
        }
    }

    pub fn curriculum_config(&self) -> CurriculumConfig {
        CurriculumConfig {
            alpha: self.cpl.alpha,
            sort_direction: self.cpl.sort_direction,
            metric: self.cpl.metric,
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.train.beta,
            batch_size: self.train.batch_size_dpo,
            lr_by_epoch: self.train.lr_by_epoch.clone(),
            max_grad_norm: self.train.max_grad_norm,
        }
    }
}
