//! Supervised fine-tuning on best search trajectories and DPO over
//! scheduled pair batches, both by plain gradient descent with analytic
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::{Trajectory, TrajectoryPair};
use crate::policy::{Policy, TrainablePolicy};
use crate::PromptMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub batch_size: usize,
    pub lr_by_epoch: Vec<f64>,
    pub max_grad_norm: Option<f64>,
}

impl DpoConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("DPO batch size must be >= 1".into()));
        }
        if self.lr_by_epoch.len() < epochs {
            return Err(Error::InvalidInput(format!(
                "lr_by_epoch has {} entries for {epochs} epochs",
                self.lr_by_epoch.len()
            )));
        }
        if self.lr_by_epoch.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::InvalidInput("learning rates must be finite and >= 0".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidInput("max_grad_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Policy-vs-reference log-ratio margin of a pair:
/// `(log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))`.
pub fn dpo_margin<P: Policy, R: Policy>(policy: &P, reference: &R, pair: &TrajectoryPair, prompts: &PromptMap) -> Result<f64> {
    let prompt = prompts.get(&pair.prompt_id).ok_or(Error::UnknownPrompt(pair.prompt_id))?;
    let w = policy.trajectory_logprob(prompt, &pair.winner.steps)? - reference.trajectory_logprob(prompt, &pair.winner.steps)?;
    let l = policy.trajectory_logprob(prompt, &pair.loser.steps)? - reference.trajectory_logprob(prompt, &pair.loser.steps)?;
    let margin = w - l;
    if !margin.is_finite() {
        return Err(Error::NonFinite(format!("DPO margin for a pair of prompt {}", pair.prompt_id)));
    }
    Ok(margin)
}

/// Mean of `-log sigmoid(beta * margin)` over the batch.
pub fn dpo_loss<P: Policy, R: Policy>(
    policy: &P,
    reference: &R,
    batch: &[&TrajectoryPair],
    prompts: &PromptMap,
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for pair in batch {
        total += softplus(-beta * dpo_margin(policy, reference, pair, prompts)?);
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its exact gradient with respect to the live policy parameters.
pub fn dpo_loss_and_grad<P: Policy, R: Policy>(
    policy: &P,
    reference: &R,
    batch: &[&TrajectoryPair],
    prompts: &PromptMap,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut total = 0.0;
    for pair in batch {
        let margin = dpo_margin(policy, reference, pair, prompts)?;
        total += softplus(-beta * margin);
        // d/dtheta softplus(-beta m) = -beta * sigmoid(-beta m) * dm/dtheta
        let coeff = -beta * sigmoid(-beta * margin) * scale;
        let prompt = &prompts[&pair.prompt_id];
        policy.accumulate_trajectory_grad(prompt, &pair.winner.steps, coeff, &mut grad)?;
        policy.accumulate_trajectory_grad(prompt, &pair.loser.steps, -coeff, &mut grad)?;
    }
    Ok((total * scale, grad))
}

fn clip_and_check(grad: &mut [f64], max_norm: Option<f64>, what: &str) -> Result<()> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        let first = grad.iter().position(|g| !g.is_finite());
        return Err(Error::NonFinite(format!("{what} gradient (norm {norm}, first bad entry {first:?})")));
    }
    if let Some(limit) = max_norm {
        if norm > limit {
            let s = limit / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(())
}

fn descend<P: TrainablePolicy>(policy: &mut P, grad: &[f64], lr: f64) {
    for (t, g) in policy.theta_mut().iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

/// One descent step on a batch with `lr_by_epoch[epoch]`. Returns the loss
/// measured before the update.
pub fn dpo_gradient_step<P: TrainablePolicy, R: Policy>(
    policy: &mut P,
    reference: &R,
    batch: &[&TrajectoryPair],
    prompts: &PromptMap,
    config: &DpoConfig,
    epoch: usize,
) -> Result<f64> {
    let lr = *config
        .lr_by_epoch
        .get(epoch)
        .ok_or_else(|| Error::InvalidInput(format!("no learning rate for epoch index {epoch}")))?;
    let (loss, mut grad) = dpo_loss_and_grad(policy, reference, batch, prompts, config.beta)?;
    clip_and_check(&mut grad, config.max_grad_norm, "DPO")?;
    descend(policy, &grad, lr);
    Ok(loss)
}

/// Mean negative log-likelihood of a trajectory set.
pub fn sft_loss<P: Policy>(policy: &P, trajectories: &[&Trajectory], prompts: &PromptMap) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for t in trajectories {
        let prompt = prompts.get(&t.prompt_id).ok_or(Error::UnknownPrompt(t.prompt_id))?;
        total -= policy.trajectory_logprob(prompt, &t.steps)?;
    }
    Ok(total / trajectories.len() as f64)
}

pub fn sft_loss_and_grad<P: Policy>(
    policy: &P,
    trajectories: &[&Trajectory],
    prompts: &PromptMap,
) -> Result<(f64, Vec<f64>)> {
    let loss = sft_loss(policy, trajectories, prompts)?;
    let scale = -1.0 / trajectories.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    for t in trajectories {
        policy.accumulate_trajectory_grad(&prompts[&t.prompt_id], &t.steps, scale, &mut grad)?;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SftReport {
    pub batch_losses: Vec<f64>,
    pub mean_loss: f64,
}

/// One pass of mini-batch descent on mean NLL, in ascending prompt id.
pub fn sft_epoch<P: TrainablePolicy>(
    policy: &mut P,
    trajectories: &[Trajectory],
    prompts: &PromptMap,
    lr: f64,
    batch_size: usize,
) -> Result<SftReport> {
    if trajectories.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("SFT batch size must be >= 1".into()));
    }
    let mut ordered: Vec<&Trajectory> = trajectories.iter().collect();
    ordered.sort_by_key(|t| t.prompt_id);
    let mut batch_losses = Vec::new();
    for batch in ordered.chunks(batch_size) {
        let (loss, mut grad) = sft_loss_and_grad(policy, batch, prompts)?;
        clip_and_check(&mut grad, None, "SFT")?;
        descend(policy, &grad, lr);
        batch_losses.push(loss);
    }
    let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
    Ok(SftReport { batch_losses, mean_loss })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    /// (global step, accuracy) at each checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    pub steps_completed: usize,
}
