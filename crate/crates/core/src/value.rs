//! Oracle-backed value model standing in for a trained value network, and
//! the per-step reward derived from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{oracle_distance, replay, EnvState, Prompt};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Reward of a step is the value of the state it lands in.
    #[default]
    PostState,
    /// Reward of a step is `V(after) - V(before)`.
    PotentialDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub gamma: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub reward_mode: RewardMode,
}

impl ValueConfig {
    pub fn noiseless(gamma: f64) -> Self {
        ValueConfig {
            gamma,
            noise_std: 0.0,
            seed: 0,
            reward_mode: RewardMode::PostState,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidInput(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ValueModel {
    config: ValueConfig,
}

impl ValueModel {
    pub fn new(config: ValueConfig) -> Result<Self> {
        config.validate()?;
        Ok(ValueModel { config })
    }

    pub fn config(&self) -> &ValueConfig {
        &self.config
    }

    /// Noise-free value: `gamma^min_steps` when the target is reachable.
    pub fn exact_value(&self, prompt: &Prompt, state: &EnvState) -> f64 {
        match oracle_distance(prompt, state) {
            Some(d) => self.config.gamma.powi(d as i32),
            None => 0.0,
        }
    }

    /// Value in [0, 1]. Noise is a pure function of the state and the run
    /// seed, so revisiting a state always yields the same estimate.
    pub fn state_value(&self, prompt: &Prompt, state: &EnvState) -> f64 {
        let base = self.exact_value(prompt, state);
        if self.config.noise_std == 0.0 {
            return base;
        }
        let key = seed::mix(&[
            self.config.seed,
            prompt.id,
            prompt.start as u64,
            prompt.target as u64,
            state.current as u64,
            u64::from(state.steps_taken),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let noise = Normal::new(0.0, self.config.noise_std)
            .expect("validated noise_std")
            .sample(&mut rng);
        (base + noise).clamp(0.0, 1.0)
    }

    pub fn step_reward(&self, prompt: &Prompt, before: &EnvState, after: &EnvState) -> f64 {
        match self.config.reward_mode {
            RewardMode::PostState => self.state_value(prompt, after),
            RewardMode::PotentialDiff => self.state_value(prompt, after) - self.state_value(prompt, before),
        }
    }

    /// Per-step rewards along a replayed step list.
    pub fn step_rewards(&self, prompt: &Prompt, steps: &[usize]) -> Result<Vec<f64>> {
        let states = replay(prompt, steps)?;
        Ok(states.windows(2).map(|w| self.step_reward(prompt, &w[0], &w[1])).collect())
    }
}
