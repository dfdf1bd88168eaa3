//! Autoregressive step policy: a softmax over the operation vocabulary,
//! linear in a fixed feature map of (current, target, remaining budget).
//!
//! Parameters are laid out row-major by action: `theta[a * FEATURE_DIM + f]`.
//! The gradient of `log pi(a | s)` is `phi(s) (x) (onehot(a) - pi(. | s))`,
//! which is what [`Policy::grad_trajectory_logprob`] accumulates.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{apply_step, is_terminal, EnvState, Prompt};
use crate::error::{Error, Result};
use crate::pairs::Trajectory;

pub const FEATURE_DIM: usize = 24;

/// Hand-specified features, every entry bounded in [-1, 1].
pub fn features(prompt: &Prompt, state: &EnvState) -> [f64; FEATURE_DIM] {
    let mut phi = [0.0; FEATURE_DIM];
    let cur = state.current;
    let tgt = prompt.target;
    let diff = tgt.saturating_sub(cur);
    let remaining = state.remaining(prompt);

    phi[0] = 1.0;
    phi[1] = (diff as f64 / 10.0).tanh();
    match remaining {
        0 | 1 => phi[2] = 1.0,
        2 => phi[3] = 1.0,
        3 => phi[4] = 1.0,
        _ => phi[5] = 1.0,
    }
    match diff {
        d if d < 0 => phi[6] = 1.0,
        0 => {}
        1 => phi[7] = 1.0,
        2 => phi[8] = 1.0,
        3 => phi[9] = 1.0,
        4..=6 => phi[10] = 1.0,
        7..=12 => phi[11] = 1.0,
        _ => phi[12] = 1.0,
    }
    if cur > 0 {
        let ratio = tgt as f64 / cur as f64;
        if ratio > 1.0 && ratio < 1.5 {
            phi[13] = 1.0;
        } else if (1.5..2.5).contains(&ratio) {
            phi[14] = 1.0;
        } else if (2.5..4.0).contains(&ratio) {
            phi[15] = 1.0;
        } else if ratio >= 4.0 {
            phi[16] = 1.0;
        }
        phi[17] = f64::from(u8::from(tgt == 2 * cur));
        phi[18] = f64::from(u8::from(tgt == 3 * cur));
        phi[22] = f64::from(u8::from(tgt % cur == 0));
    }
    phi[19] = f64::from(u8::from(cur.rem_euclid(2) == 0));
    phi[20] = f64::from(u8::from(tgt.rem_euclid(2) == 0));
    phi[21] = f64::from(u8::from(tgt.rem_euclid(3) == 0));
    phi[23] = f64::from(u8::from(remaining <= 1 && (1..=3).contains(&diff)));
    phi
}

/// Flat parameter vector plus its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub feature_dim: usize,
    pub vocab_size: usize,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize) -> Self {
        PolicyParams {
            theta: vec![0.0; FEATURE_DIM * vocab_size],
            feature_dim: FEATURE_DIM,
            vocab_size,
        }
    }

    pub fn from_theta(theta: Vec<f64>, vocab_size: usize) -> Result<Self> {
        if theta.len() != FEATURE_DIM * vocab_size {
            return Err(Error::InvalidInput(format!(
                "parameter vector has {} entries, expected {} x {}",
                theta.len(),
                FEATURE_DIM,
                vocab_size
            )));
        }
        Ok(PolicyParams {
            theta,
            feature_dim: FEATURE_DIM,
            vocab_size,
        })
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.theta.iter().position(|t| !t.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("policy parameter {i} = {}", self.theta[i]))),
            None => Ok(()),
        }
    }

    /// SHA-256 over the little-endian bit patterns of `theta`.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.theta {
            hasher.update(t.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_record(&self) -> ParamsRecord {
        ParamsRecord {
            feature_dim: self.feature_dim,
            vocab_size: self.vocab_size,
            checksum: self.checksum(),
            theta: self.theta.clone(),
        }
    }

    pub fn from_record(record: ParamsRecord) -> Result<Self> {
        if record.feature_dim != FEATURE_DIM {
            return Err(Error::InvalidInput(format!(
                "feature_dim {} does not match this build ({FEATURE_DIM})",
                record.feature_dim
            )));
        }
        let params = PolicyParams::from_theta(record.theta, record.vocab_size)?;
        if params.checksum() != record.checksum {
            return Err(Error::InvalidInput("parameter checksum mismatch".into()));
        }
        Ok(params)
    }
}

/// On-disk form of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsRecord {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub checksum: String,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
}

impl StepDistribution {
    /// Index of the most likely op; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The read side of a step policy. Training additionally needs
/// [`TrainablePolicy`].
pub trait Policy {
    fn params(&self) -> &PolicyParams;

    fn step_distribution(&self, prompt: &Prompt, state: &EnvState) -> Result<StepDistribution>;

    /// Adds `scale * grad log pi(action | state)` into `grad`.
    fn accumulate_step_grad(
        &self,
        prompt: &Prompt,
        state: &EnvState,
        action: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().theta.len()
    }

    /// `sum_t log pi(y_t | q, y_<t)` over the step list.
    fn trajectory_logprob(&self, prompt: &Prompt, steps: &[usize]) -> Result<f64> {
        let mut state = prompt.initial_state();
        let mut total = 0.0;
        for &a in steps {
            let dist = self.checked_distribution(prompt, &state)?;
            let p = *dist.probs.get(a).ok_or(Error::ActionOutOfRange {
                action: a,
                vocab_size: dist.probs.len(),
            })?;
            if p <= 0.0 {
                return Err(Error::NonFinite(format!(
                    "zero probability for action {a} at value {}",
                    state.current
                )));
            }
            total += p.ln();
            state = apply_step(prompt, &state, a)?;
        }
        Ok(total)
    }

    fn grad_trajectory_logprob(&self, prompt: &Prompt, steps: &[usize]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_trajectory_grad(prompt, steps, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * grad log P(steps | prompt)` into `grad`.
    fn accumulate_trajectory_grad(&self, prompt: &Prompt, steps: &[usize], scale: f64, grad: &mut [f64]) -> Result<()> {
        let mut state = prompt.initial_state();
        for &a in steps {
            if is_terminal(prompt, &state) {
                return Err(Error::TerminalState {
                    current: state.current,
                    steps_taken: state.steps_taken,
                });
            }
            self.accumulate_step_grad(prompt, &state, a, scale, grad)?;
            state = apply_step(prompt, &state, a)?;
        }
        Ok(())
    }

    /// Samples ops until the state is terminal. The returned trajectory's
    /// value is 1 for a correct answer and 0 otherwise.
    fn sample_trajectory<R: Rng + ?Sized>(&self, prompt: &Prompt, rng: &mut R) -> Result<Trajectory>
    where
        Self: Sized,
    {
        let mut state = prompt.initial_state();
        let mut steps = Vec::new();
        while !is_terminal(prompt, &state) {
            let a = self.step_distribution(prompt, &state)?.sample(rng);
            state = apply_step(prompt, &state, a)?;
            steps.push(a);
        }
        Ok(Trajectory {
            prompt_id: prompt.id,
            steps,
            complete: true,
            value: if state.current == prompt.target { 1.0 } else { 0.0 },
        })
    }

    /// Argmax decoding with lowest-index tie breaking.
    fn greedy_decode(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        let mut state = prompt.initial_state();
        let mut steps = Vec::new();
        while !is_terminal(prompt, &state) {
            let a = self.step_distribution(prompt, &state)?.argmax();
            state = apply_step(prompt, &state, a)?;
            steps.push(a);
        }
        Ok(steps)
    }

    #[doc(hidden)]
    fn checked_distribution(&self, prompt: &Prompt, state: &EnvState) -> Result<StepDistribution> {
        if is_terminal(prompt, state) {
            return Err(Error::TerminalState {
                current: state.current,
                steps_taken: state.steps_taken,
            });
        }
        self.step_distribution(prompt, state)
    }
}

/// Policies whose parameters can be updated in place.
pub trait TrainablePolicy: Policy + Clone {
    fn theta_mut(&mut self) -> &mut [f64];

    fn snapshot(&self) -> FrozenPolicy<Self> {
        FrozenPolicy(Arc::new(self.clone()))
    }
}

/// Linear-softmax reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxPolicy {
    params: PolicyParams,
}

impl LinearSoftmaxPolicy {
    pub fn new(params: PolicyParams) -> Result<Self> {
        if params.feature_dim != FEATURE_DIM || params.theta.len() != FEATURE_DIM * params.vocab_size {
            return Err(Error::InvalidInput("policy parameter shape mismatch".into()));
        }
        Ok(LinearSoftmaxPolicy { params })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        LinearSoftmaxPolicy {
            params: PolicyParams::zeros(vocab_size),
        }
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    fn check_vocab(&self, prompt: &Prompt) -> Result<()> {
        if prompt.vocab_size() != self.params.vocab_size {
            return Err(Error::InvalidInput(format!(
                "policy covers {} ops but prompt {} has {}",
                self.params.vocab_size,
                prompt.id,
                prompt.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn scores(&self, phi: &[f64; FEATURE_DIM]) -> Vec<f64> {
        self.params
            .theta
            .chunks_exact(FEATURE_DIM)
            .map(|row| row.iter().zip(phi).map(|(t, f)| t * f).sum())
            .collect()
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn params(&self) -> &PolicyParams {
        &self.params
    }

    fn step_distribution(&self, prompt: &Prompt, state: &EnvState) -> Result<StepDistribution> {
        self.check_vocab(prompt)?;
        self.params.ensure_finite()?;
        let phi = features(prompt, state);
        Ok(StepDistribution {
            probs: softmax(&self.scores(&phi)),
        })
    }

    fn accumulate_step_grad(
        &self,
        prompt: &Prompt,
        state: &EnvState,
        action: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let dist = self.step_distribution(prompt, state)?;
        if action >= dist.probs.len() {
            return Err(Error::ActionOutOfRange {
                action,
                vocab_size: dist.probs.len(),
            });
        }
        let phi = features(prompt, state);
        for (a, (row, &p)) in grad.chunks_exact_mut(FEATURE_DIM).zip(&dist.probs).enumerate() {
            let coeff = scale * (f64::from(u8::from(a == action)) - p);
            for (g, f) in row.iter_mut().zip(&phi) {
                *g += coeff * f;
            }
        }
        Ok(())
    }
}

impl TrainablePolicy for LinearSoftmaxPolicy {
    fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.params.theta
    }
}

/// Immutable copy of a policy used as the DPO reference.
#[derive(Debug, Clone)]
pub struct FrozenPolicy<P>(Arc<P>);

impl<P: Policy> FrozenPolicy<P> {
    pub fn inner(&self) -> &P {
        &self.0
    }
}

impl<P: Policy> Policy for FrozenPolicy<P> {
    fn params(&self) -> &PolicyParams {
        self.0.params()
    }

    fn step_distribution(&self, prompt: &Prompt, state: &EnvState) -> Result<StepDistribution> {
        self.0.step_distribution(prompt, state)
    }

    fn accumulate_step_grad(
        &self,
        prompt: &Prompt,
        state: &EnvState,
        action: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.0.accumulate_step_grad(prompt, state, action, scale, grad)
    }
}
