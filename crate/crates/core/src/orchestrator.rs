//! End-to-end self-improvement loop and its baselines.
//!
//! [`prepare`] runs the stages every variant shares (prompt synthesis, one
//! round of tree search with the base policy, fine-tuning on the best
//! trajectory per tree). [`run_variant`] then builds the variant's pair
//! buffer and runs the offline preference epochs. Running several variants
//! off one [`Prepared`] guarantees they see identical prompts, trees and
//! starting checkpoint.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts;
use crate::config::{RunConfig, Variant};
use crate::cpl::{shuffle_schedule, CurriculumScheduler, Schedule};
use crate::env::{check_answer, synthesize_prompts, Prompt};
use crate::error::{Error, Result};
use crate::mcts::{run_search, SearchTree};
use crate::pairs::{build_buffer, PairBuffer, PairKind, TrajectoryPair};
use crate::policy::{LinearSoftmaxPolicy, Policy, TrainablePolicy};
use crate::seed::{self, Stream};
use crate::train::{dpo_gradient_step, sft_epoch, StepRecord, TrainReport};
use crate::value::ValueModel;
use crate::{prompt_map, PromptMap};

/// Fraction of prompts solved by greedy decoding.
pub fn evaluate_policy<P: Policy + Sync>(policy: &P, prompts: &[Prompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let solved = prompts
        .par_iter()
        .map(|p| {
            let steps = policy.greedy_decode(p)?;
            Ok(usize::from(check_answer(p, &steps)?.correct))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(solved as f64 / prompts.len() as f64)
}

/// Searches every prompt independently; output order follows `prompts`.
pub fn search_all<P: Policy + Sync>(config: &RunConfig, prompts: &[Prompt], policy: &P, value: &ValueModel) -> Result<Vec<SearchTree>> {
    prompts
        .par_iter()
        .map(|p| run_search(p, policy, value, &config.mcts_config(p.id)))
        .collect()
}

/// Shared stages of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train_prompts: Vec<Prompt>,
    pub eval_prompts: Vec<Prompt>,
    pub trees: Vec<SearchTree>,
    pub base_policy: LinearSoftmaxPolicy,
    pub sft_policy: LinearSoftmaxPolicy,
    pub base_accuracy: f64,
    pub sft_accuracy: f64,
    pub sft_losses: Vec<f64>,
    pub digests: ArtifactDigests,
}

impl Prepared {
    pub fn train_map(&self) -> PromptMap {
        prompt_map(&self.train_prompts)
    }
}

/// Checksums of the shared artifacts; equal digests across variants show
/// they ran under the same budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigests {
    pub prompts: String,
    pub trees: String,
    pub sft_policy: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Train prompts take ids `0..n_train`; eval prompts follow, so the two
/// sets are disjoint by id.
pub fn synthesize_split(config: &RunConfig) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    let n_train = config.run.num_train_prompts;
    let train = synthesize_prompts(&config.env, n_train, 0, seed::derive(config.run.seed, Stream::TrainPrompts, 0))?;
    let eval = synthesize_prompts(
        &config.env,
        config.run.num_eval_prompts,
        n_train as u64,
        seed::derive(config.run.seed, Stream::EvalPrompts, 0),
    )?;
    Ok((train, eval))
}

/// Fine-tunes a copy of `base` on the best trajectory of every tree that
/// reached a terminal node.
pub fn supervised_stage(
    config: &RunConfig,
    base: &LinearSoftmaxPolicy,
    trees: &[SearchTree],
    prompts: &PromptMap,
) -> Result<(LinearSoftmaxPolicy, Vec<f64>)> {
    let best: Vec<_> = trees.iter().filter_map(|t| t.best_trajectory().ok()).collect();
    let mut policy = base.clone();
    let mut losses = Vec::new();
    for _ in 0..config.train.sft_epochs {
        let report = sft_epoch(&mut policy, &best, prompts, config.train.lr_sft, config.train.batch_size_sft)?;
        losses.push(report.mean_loss);
    }
    Ok((policy, losses))
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (train_prompts, eval_prompts) = synthesize_split(config)?;
    let value = ValueModel::new(config.value_config())?;
    let vocab = config.env.op_vocab.len();
    let base_policy = LinearSoftmaxPolicy::uniform(vocab);
    let trees = search_all(config, &train_prompts, &base_policy, &value)?;
    let train_map = prompt_map(&train_prompts);
    let (sft_policy, sft_losses) = supervised_stage(config, &base_policy, &trees, &train_map)?;

    let mut all_prompts = train_prompts.clone();
    all_prompts.extend(eval_prompts.iter().cloned());
    let digests = ArtifactDigests {
        prompts: sha256_hex(&artifacts::prompts_to_jsonl(&all_prompts)?),
        trees: sha256_hex(&artifacts::trees_to_jsonl(&trees)?),
        sft_policy: sft_policy.params().checksum(),
    };
    Ok(Prepared {
        base_accuracy: evaluate_policy(&base_policy, &eval_prompts)?,
        sft_accuracy: evaluate_policy(&sft_policy, &eval_prompts)?,
        train_prompts,
        eval_prompts,
        trees,
        base_policy,
        sft_policy,
        sft_losses,
        digests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub stepwise: usize,
    pub complete: usize,
    pub depthwise: usize,
    pub total: usize,
}

impl BufferStats {
    pub fn of(buffer: &PairBuffer) -> Self {
        BufferStats {
            stepwise: buffer.count_kind(PairKind::Stepwise),
            complete: buffer.count_kind(PairKind::Complete),
            depthwise: buffer.count_kind(PairKind::Depthwise),
            total: buffer.len(),
        }
    }
}

/// Metrics of one variant run; serialized as `result.json`.
///
/// `epoch_accuracies[k]` is the accuracy at the end of epoch `k + 1`;
/// `epoch_best_accuracies[k]` is the best checkpoint inside that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub alpha: f64,
    pub base_accuracy: f64,
    pub sft_accuracy: f64,
    pub epoch_accuracies: Vec<f64>,
    pub epoch_best_accuracies: Vec<f64>,
    pub best_checkpoint_accuracy: f64,
    pub checkpoints: Vec<Checkpoint>,
    pub buffer: BufferStats,
    pub artifacts: ArtifactDigests,
    /// Excluded from `result.json` so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Everything a variant run produces.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub result: RunResult,
    pub buffer: PairBuffer,
    pub schedules: Vec<Schedule>,
    pub report: TrainReport,
    pub policy: LinearSoftmaxPolicy,
}

/// Offline preference learning over a fixed buffer, starting from
/// `start` (also the frozen reference).
pub fn preference_epochs(
    config: &RunConfig,
    variant: Variant,
    buffer: &PairBuffer,
    start: &LinearSoftmaxPolicy,
    prompts: &PromptMap,
    eval_prompts: &[Prompt],
) -> Result<(LinearSoftmaxPolicy, Vec<Schedule>, TrainReport)> {
    let value = ValueModel::new(config.value_config())?;
    let dpo = config.dpo_config();
    let mut policy = start.clone();
    let reference = start.snapshot();
    let mut scheduler = CurriculumScheduler::new(config.curriculum_config())?;
    let mut schedules = Vec::new();
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..config.run.epochs {
        let schedule = match variant {
            Variant::Cpl => scheduler.schedule_epoch(buffer, prompts, &policy, &value, epoch + 1)?,
            _ => {
                let weights = scheduler.weigh(buffer, prompts, &policy, &value)?;
                let seed = seed::derive(config.run.seed, Stream::Shuffle, epoch as u64);
                shuffle_schedule(buffer, weights, seed, epoch + 1)?
            }
        };
        let mut losses = Vec::new();
        for chunk in schedule.order.chunks(dpo.batch_size) {
            let batch: Vec<&TrajectoryPair> = chunk.iter().map(|&i| buffer.get(i)).collect();
            let loss = dpo_gradient_step(&mut policy, &reference, &batch, prompts, &dpo, epoch)?;
            step += 1;
            losses.push(loss);
            let eval_accuracy = if step.is_multiple_of(config.train.checkpoint_every) {
                let acc = evaluate_policy(&policy, eval_prompts)?;
                report.checkpoints.push((step, acc));
                Some(acc)
            } else {
                None
            };
            report.steps.push(StepRecord {
                step,
                epoch: epoch + 1,
                loss,
                eval_accuracy,
            });
        }
        // the end of every epoch is a checkpoint too
        if report.checkpoints.last().is_none_or(|&(s, _)| s != step) {
            let acc = evaluate_policy(&policy, eval_prompts)?;
            report.checkpoints.push((step, acc));
            if let Some(last) = report.steps.last_mut() {
                last.eval_accuracy = Some(acc);
            }
        }
        report.epoch_mean_loss.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
        schedules.push(schedule);
    }
    report.steps_completed = step;
    Ok((policy, schedules, report))
}

pub fn run_variant(config: &RunConfig, prepared: &Prepared, variant: Variant) -> Result<VariantRun> {
    let started = Instant::now();
    let prompts = prepared.train_map();
    let mut config = config.clone();
    config.run.variant = variant;
    let mode = config.buffer_mode();
    let buffer = build_buffer(&prepared.trees, config.pairs.tau, mode)?;
    let epochs = config.run.epochs;

    let (policy, schedules, report) = if variant == Variant::SftOnly {
        (prepared.sft_policy.clone(), Vec::new(), TrainReport::default())
    } else {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer { tau: config.pairs.tau });
        }
        preference_epochs(&config, variant, &buffer, &prepared.sft_policy, &prompts, &prepared.eval_prompts)?
    };

    let checkpoints = checkpoints_with_epochs(&report);
    let (epoch_accuracies, epoch_best_accuracies) = if variant == Variant::SftOnly {
        (vec![prepared.sft_accuracy; epochs], vec![prepared.sft_accuracy; epochs])
    } else {
        per_epoch_accuracies(&checkpoints, epochs)
    };
    let best_checkpoint_accuracy = checkpoints
        .iter()
        .map(|c| c.accuracy)
        .fold(if variant == Variant::SftOnly { prepared.sft_accuracy } else { f64::NEG_INFINITY }, f64::max);

    let result = RunResult {
        variant,
        seed: config.run.seed,
        alpha: config.cpl.alpha,
        base_accuracy: prepared.base_accuracy,
        sft_accuracy: prepared.sft_accuracy,
        epoch_accuracies,
        epoch_best_accuracies,
        best_checkpoint_accuracy,
        checkpoints,
        buffer: BufferStats::of(&buffer),
        artifacts: prepared.digests.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(VariantRun {
        result,
        buffer,
        schedules,
        report,
        policy,
    })
}

fn checkpoints_with_epochs(report: &TrainReport) -> Vec<Checkpoint> {
    report
        .checkpoints
        .iter()
        .map(|&(step, accuracy)| Checkpoint {
            step,
            epoch: report.steps[step - 1].epoch,
            accuracy,
        })
        .collect()
}

fn per_epoch_accuracies(checkpoints: &[Checkpoint], epochs: usize) -> (Vec<f64>, Vec<f64>) {
    (1..=epochs)
        .map(|e| {
            let inside: Vec<f64> = checkpoints.iter().filter(|c| c.epoch == e).map(|c| c.accuracy).collect();
            let last = inside.last().copied().unwrap_or(f64::NAN);
            let best = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (last, best)
        })
        .unzip()
}

/// Full loop for the configured variant.
pub fn self_improve(config: &RunConfig) -> Result<RunResult> {
    let prepared = prepare(config)?;
    Ok(run_variant(config, &prepared, config.run.variant)?.result)
}

/// Same pipeline as [`self_improve`] with the variant swapped.
pub fn run_baseline(config: &RunConfig, variant: Variant) -> Result<RunResult> {
    let mut config = config.clone();
    config.run.variant = variant;
    self_improve(&config)
}

/// One entry of a curriculum-weight sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SweepPoint {
    Alpha(f64),
    PgOnly,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        match self {
            SweepPoint::Alpha(a) if *a == 0.0 => "rg_only".into(),
            SweepPoint::Alpha(a) => format!("alpha={a}"),
            SweepPoint::PgOnly => "pg_only".into(),
        }
    }

    pub fn standard() -> Vec<SweepPoint> {
        let mut v: Vec<SweepPoint> = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0].into_iter().map(SweepPoint::Alpha).collect();
        v.push(SweepPoint::PgOnly);
        v
    }
}

/// Runs the curriculum variant once per sweep point off one shared
/// preparation.
pub fn alpha_sweep(config: &RunConfig, prepared: &Prepared, points: &[SweepPoint]) -> Result<Vec<(String, RunResult)>> {
    points
        .iter()
        .map(|pt| {
            let mut cfg = config.clone();
            match *pt {
                SweepPoint::Alpha(a) => {
                    cfg.cpl.alpha = a;
                    cfg.cpl.metric = crate::cpl::CurriculumMetric::Combined;
                }
                SweepPoint::PgOnly => cfg.cpl.metric = crate::cpl::CurriculumMetric::PgOnly,
            }
            Ok((pt.label(), run_variant(&cfg, prepared, Variant::Cpl)?.result))
        })
        .collect()
}
