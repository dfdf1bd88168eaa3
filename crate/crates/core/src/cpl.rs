//! Curriculum scheduling of the preference buffer.
//!
//! Each epoch every pair gets a static reward gap `r_g` (summed step rewards
//! of winner minus loser) and a dynamic prediction gap `p_g` (log-likelihood
//! of winner minus loser under the current policy). Both are min-max
//! normalized over the whole buffer and blended as `r_g + alpha * p_g`.
//! Pairs are sorted inside each prompt and then emitted round-robin across
//! prompts in ascending prompt id.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Prompt;
use crate::error::{Error, Result};
use crate::pairs::{PairBuffer, TrajectoryPair};
use crate::policy::Policy;
use crate::value::ValueModel;
use crate::PromptMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortDirection {
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumMetric {
    /// `r_g_norm + alpha * p_g_norm`
    #[default]
    Combined,
    /// `p_g_norm` alone.
    PgOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairWeights {
    pub pair_index: usize,
    pub prompt_id: u64,
    pub r_g: f64,
    pub p_g: f64,
    pub r_g_norm: f64,
    pub p_g_norm: f64,
    pub w_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epoch: usize,
    /// Pair indices in training order.
    pub order: Vec<usize>,
    /// Weights indexed by pair index.
    pub weights: Vec<PairWeights>,
}

/// One CSV row of an exported schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRow {
    pub pair_index: usize,
    pub prompt_id: u64,
    pub r_g: f64,
    pub p_g: f64,
    pub r_g_norm: f64,
    pub p_g_norm: f64,
    pub w_g: f64,
    pub emit_position: usize,
}

impl Schedule {
    pub fn rows(&self) -> Vec<ScheduleRow> {
        self.order
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let w = &self.weights[i];
                ScheduleRow {
                    pair_index: i,
                    prompt_id: w.prompt_id,
                    r_g: w.r_g,
                    p_g: w.p_g,
                    r_g_norm: w.r_g_norm,
                    p_g_norm: w.p_g_norm,
                    w_g: w.w_g,
                    emit_position: pos,
                }
            })
            .collect()
    }
}

pub fn reward_gap(pair: &TrajectoryPair, prompt: &Prompt, value: &ValueModel) -> Result<f64> {
    let w: f64 = value.step_rewards(prompt, &pair.winner.steps)?.iter().sum();
    let l: f64 = value.step_rewards(prompt, &pair.loser.steps)?.iter().sum();
    Ok(w - l)
}

pub fn prediction_gap<P: Policy>(pair: &TrajectoryPair, prompt: &Prompt, policy: &P) -> Result<f64> {
    Ok(policy.trajectory_logprob(prompt, &pair.winner.steps)? - policy.trajectory_logprob(prompt, &pair.loser.steps)?)
}

/// `(v - min) / (max - min)`; a zero range maps every entry to 0.5.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|&v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

pub fn combined_weight(r_g_norm: f64, p_g_norm: f64, alpha: f64) -> f64 {
    r_g_norm + alpha * p_g_norm
}

/// Emits the head of every non-empty queue in turn until all are drained.
pub fn round_robin(mut queues: Vec<VecDeque<usize>>) -> Vec<usize> {
    let total = queues.iter().map(VecDeque::len).sum();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for q in queues.iter_mut() {
            if let Some(i) = q.pop_front() {
                out.push(i);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub alpha: f64,
    #[serde(default)]
    pub sort_direction: SortDirection,
    #[serde(default)]
    pub metric: CurriculumMetric,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            alpha: 0.5,
            sort_direction: SortDirection::Descending,
            metric: CurriculumMetric::Combined,
        }
    }
}

/// Stateful scheduler: reward gaps are computed once and reused.
#[derive(Debug, Clone)]
pub struct CurriculumScheduler {
    config: CurriculumConfig,
    reward_gaps: Option<Vec<f64>>,
}

impl CurriculumScheduler {
    pub fn new(config: CurriculumConfig) -> Result<Self> {
        if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
            return Err(Error::InvalidInput(format!("alpha must be >= 0, got {}", config.alpha)));
        }
        Ok(CurriculumScheduler {
            config,
            reward_gaps: None,
        })
    }

    pub fn config(&self) -> &CurriculumConfig {
        &self.config
    }

    fn reward_gaps(&mut self, buffer: &PairBuffer, prompts: &PromptMap, value: &ValueModel) -> Result<&[f64]> {
        if self.reward_gaps.as_ref().is_none_or(|r| r.len() != buffer.len()) {
            let gaps = buffer
                .pairs()
                .iter()
                .map(|p| reward_gap(p, lookup(prompts, p.prompt_id)?, value))
                .collect::<Result<Vec<_>>>()?;
            self.reward_gaps = Some(gaps);
        }
        Ok(self.reward_gaps.as_deref().expect("filled above"))
    }

    /// Weights for every pair under the current policy.
    pub fn weigh<P: Policy>(
        &mut self,
        buffer: &PairBuffer,
        prompts: &PromptMap,
        policy: &P,
        value: &ValueModel,
    ) -> Result<Vec<PairWeights>> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer { tau: f64::NAN });
        }
        let r_g = self.reward_gaps(buffer, prompts, value)?.to_vec();
        let p_g = buffer
            .pairs()
            .iter()
            .map(|p| prediction_gap(p, lookup(prompts, p.prompt_id)?, policy))
            .collect::<Result<Vec<_>>>()?;
        let r_norm = minmax_normalize(&r_g);
        let p_norm = minmax_normalize(&p_g);
        Ok(buffer
            .pairs()
            .iter()
            .enumerate()
            .map(|(i, pair)| PairWeights {
                pair_index: i,
                prompt_id: pair.prompt_id,
                r_g: r_g[i],
                p_g: p_g[i],
                r_g_norm: r_norm[i],
                p_g_norm: p_norm[i],
                w_g: match self.config.metric {
                    CurriculumMetric::Combined => combined_weight(r_norm[i], p_norm[i], self.config.alpha),
                    CurriculumMetric::PgOnly => p_norm[i],
                },
            })
            .collect())
    }

    pub fn schedule_epoch<P: Policy>(
        &mut self,
        buffer: &PairBuffer,
        prompts: &PromptMap,
        policy: &P,
        value: &ValueModel,
        epoch: usize,
    ) -> Result<Schedule> {
        let weights = self.weigh(buffer, prompts, policy, value)?;
        let direction = self.config.sort_direction;
        let queues = buffer
            .by_prompt()
            .values()
            .map(|indices| {
                let mut sorted = indices.clone();
                // stable sort keeps ascending pair index among ties
                sorted.sort_by(|&a, &b| {
                    let ord = weights[a].w_g.total_cmp(&weights[b].w_g);
                    match direction {
                        SortDirection::Descending => ord.reverse(),
                        SortDirection::Ascending => ord,
                    }
                });
                VecDeque::from(sorted)
            })
            .collect();
        Ok(Schedule {
            epoch,
            order: round_robin(queues),
            weights,
        })
    }
}

/// Seeded uniform permutation of the buffer, with weights attached for audit.
pub fn shuffle_schedule(buffer: &PairBuffer, weights: Vec<PairWeights>, seed: u64, epoch: usize) -> Result<Schedule> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer { tau: f64::NAN });
    }
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Schedule { epoch, order, weights })
}

fn lookup(prompts: &PromptMap, id: u64) -> Result<&Prompt> {
    prompts.get(&id).ok_or(Error::UnknownPrompt(id))
}

/// Groups emitted pair indices by prompt, preserving emission order.
pub fn per_prompt_sequences(schedule: &Schedule) -> BTreeMap<u64, Vec<usize>> {
    let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &i in &schedule.order {
        map.entry(schedule.weights[i].prompt_id).or_default().push(i);
    }
    map
}
