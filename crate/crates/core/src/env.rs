//! Reach-target puzzle: start from an integer and hit the target with a
//! short sequence of arithmetic operations under a step budget.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rejection-sampling cap per synthesized prompt.
pub const MAX_SYNTH_ATTEMPTS: usize = 1000;

/// One arithmetic operation of the action vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Op {
    Add(i64),
    Mul(i64),
}

impl Op {
    pub fn apply(self, x: i64) -> Option<i64> {
        match self {
            Op::Add(k) => x.checked_add(k),
            Op::Mul(k) => x.checked_mul(k),
        }
    }

    /// True when applying the op never decreases a nonnegative value.
    fn is_monotone(self) -> bool {
        match self {
            Op::Add(k) => k >= 0,
            Op::Mul(k) => k >= 1,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Add(k) if *k < 0 => write!(f, "{k}"),
            Op::Add(k) => write!(f, "+{k}"),
            Op::Mul(k) => write!(f, "*{k}"),
        }
    }
}

impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidInput(format!("unrecognized operation `{s}`"));
        let (head, rest) = s.split_at(s.chars().next().ok_or_else(bad)?.len_utf8());
        let k: i64 = rest.parse().map_err(|_| bad())?;
        match head {
            "+" => Ok(Op::Add(k)),
            "-" => Ok(Op::Add(-k)),
            "*" | "x" | "×" => Ok(Op::Mul(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Op {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Op> for String {
    fn from(op: Op) -> String {
        op.to_string()
    }
}

pub fn default_op_vocab() -> Vec<Op> {
    vec![Op::Add(1), Op::Add(2), Op::Add(3), Op::Mul(2), Op::Mul(3)]
}

/// A task instance. Field order matches the JSONL record layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub id: u64,
    pub start: i64,
    pub target: i64,
    pub budget: u32,
    pub op_vocab: Vec<Op>,
}

impl Prompt {
    pub fn new(id: u64, start: i64, target: i64, budget: u32, op_vocab: Vec<Op>) -> Result<Self> {
        let prompt = Prompt {
            id,
            start,
            target,
            budget,
            op_vocab,
        };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidInput(format!("prompt {}: budget must be >= 1", self.id)));
        }
        validate_vocab(&self.op_vocab)
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            prompt_id: self.id,
            current: self.start,
            steps_taken: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.op_vocab.len()
    }
}

pub fn validate_vocab(ops: &[Op]) -> Result<()> {
    if ops.is_empty() {
        return Err(Error::InvalidInput("operation vocabulary is empty".into()));
    }
    let distinct: BTreeSet<String> = ops.iter().map(|o| o.to_string()).collect();
    if distinct.len() != ops.len() {
        return Err(Error::InvalidInput("operation vocabulary has duplicates".into()));
    }
    Ok(())
}

/// Partial-solution state: the prompt plus the value reached so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub prompt_id: u64,
    pub current: i64,
    pub steps_taken: u32,
}

impl EnvState {
    pub fn remaining(&self, prompt: &Prompt) -> u32 {
        prompt.budget.saturating_sub(self.steps_taken)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub correct: bool,
    pub steps_used: usize,
}

pub fn is_terminal(prompt: &Prompt, state: &EnvState) -> bool {
    state.current == prompt.target || state.steps_taken >= prompt.budget
}

pub fn apply_step(prompt: &Prompt, state: &EnvState, action: usize) -> Result<EnvState> {
    let op = *prompt.op_vocab.get(action).ok_or(Error::ActionOutOfRange {
        action,
        vocab_size: prompt.vocab_size(),
    })?;
    if is_terminal(prompt, state) {
        return Err(Error::TerminalState {
            current: state.current,
            steps_taken: state.steps_taken,
        });
    }
    let current = op
        .apply(state.current)
        .ok_or_else(|| Error::InvalidInput(format!("integer overflow applying {op} to {}", state.current)))?;
    Ok(EnvState {
        prompt_id: state.prompt_id,
        current,
        steps_taken: state.steps_taken + 1,
    })
}

/// Replays `steps` from the prompt's start state, returning every visited
/// state including the initial one.
pub fn replay(prompt: &Prompt, steps: &[usize]) -> Result<Vec<EnvState>> {
    if steps.len() > prompt.budget as usize {
        return Err(Error::InvalidInput(format!(
            "{} steps exceed the budget of {}",
            steps.len(),
            prompt.budget
        )));
    }
    let mut states = Vec::with_capacity(steps.len() + 1);
    let mut state = prompt.initial_state();
    states.push(state);
    for &a in steps {
        state = apply_step(prompt, &state, a)?;
        states.push(state);
    }
    Ok(states)
}

pub fn check_answer(prompt: &Prompt, steps: &[usize]) -> Result<Outcome> {
    let states = replay(prompt, steps)?;
    let last = states.last().expect("replay yields the initial state");
    Ok(Outcome {
        correct: last.current == prompt.target,
        steps_used: steps.len(),
    })
}

/// Minimum number of steps needed to reach the target from `state` within
/// the remaining budget, by breadth-first search over values. `None` when
/// the target is unreachable.
pub fn oracle_distance(prompt: &Prompt, state: &EnvState) -> Option<u32> {
    if state.current == prompt.target {
        return Some(0);
    }
    let remaining = state.remaining(prompt);
    // With monotone ops on nonnegative values, anything past the target is dead.
    let prune = prompt.op_vocab.iter().all(|op| op.is_monotone()) && state.current >= 0;
    let mut seen = BTreeSet::from([state.current]);
    let mut frontier = vec![state.current];
    for depth in 1..=remaining {
        let mut next = Vec::new();
        for &x in &frontier {
            for op in &prompt.op_vocab {
                let Some(y) = op.apply(x) else { continue };
                if y == prompt.target {
                    return Some(depth);
                }
                if prune && y > prompt.target {
                    continue;
                }
                if seen.insert(y) {
                    next.push(y);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    None
}

/// Sampling ranges and vocabulary for synthesized prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub start_min: i64,
    pub start_max: i64,
    pub target_min: i64,
    pub target_max: i64,
    pub budget: u32,
    pub op_vocab: Vec<Op>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            start_min: 1,
            start_max: 5,
            target_min: 6,
            target_max: 30,
            budget: 4,
            op_vocab: default_op_vocab(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.start_min > self.start_max {
            return Err(Error::InvalidInput("empty start range".into()));
        }
        if self.target_min > self.target_max {
            return Err(Error::InvalidInput("empty target range".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidInput("budget must be >= 1".into()));
        }
        validate_vocab(&self.op_vocab)
    }
}

/// Draws `count` solvable prompts with ids `first_id..first_id + count`.
pub fn synthesize_prompts(config: &EnvConfig, count: usize, first_id: u64, seed: u64) -> Result<Vec<Prompt>> {
    if count == 0 {
        return Err(Error::InvalidInput("prompt count must be >= 1".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let id = first_id + i as u64;
        let mut found = None;
        for _ in 0..MAX_SYNTH_ATTEMPTS {
            let start = rng.random_range(config.start_min..=config.start_max);
            let target = rng.random_range(config.target_min..=config.target_max);
            let candidate = Prompt {
                id,
                start,
                target,
                budget: config.budget,
                op_vocab: config.op_vocab.clone(),
            };
            if oracle_distance(&candidate, &candidate.initial_state()).is_some() {
                found = Some(candidate);
                break;
            }
        }
        prompts.push(found.ok_or(Error::SynthesisFailed {
            attempts: MAX_SYNTH_ATTEMPTS,
            start_range: (config.start_min, config.start_max),
            target_range: (config.target_min, config.target_max),
            budget: config.budget,
        })?);
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prompt(start: i64, target: i64, budget: u32, ops: &[&str]) -> Prompt {
        let ops = ops.iter().map(|s| s.parse().unwrap()).collect();
        Prompt::new(0, start, target, budget, ops).unwrap()
    }

    fn state(p: &Prompt, current: i64, steps_taken: u32) -> EnvState {
        EnvState {
            prompt_id: p.id,
            current,
            steps_taken,
        }
    }

    #[test]
    fn op_strings_roundtrip() {
        for op in default_op_vocab() {
            assert_eq!(op.to_string().parse::<Op>().unwrap(), op);
        }
        assert_eq!("x2".parse::<Op>().unwrap(), Op::Mul(2));
        assert_eq!("-4".parse::<Op>().unwrap(), Op::Add(-4));
        assert!("/2".parse::<Op>().is_err());
        assert!("".parse::<Op>().is_err());
    }

    #[test]
    fn prompt_validation() {
        assert!(Prompt::new(0, 1, 2, 0, default_op_vocab()).is_err());
        assert!(Prompt::new(0, 1, 2, 3, vec![]).is_err());
        assert!(Prompt::new(0, 1, 2, 3, vec![Op::Add(1), Op::Add(1)]).is_err());
    }

    #[test]
    fn apply_step_arithmetic() {
        let p = prompt(3, 100, 4, &["+1", "*2"]);
        let s = p.initial_state();
        let doubled = apply_step(&p, &s, 1).unwrap();
        assert_eq!((doubled.current, doubled.steps_taken), (6, 1));
        let inc = apply_step(&p, &s, 0).unwrap();
        assert_eq!((inc.current, inc.steps_taken), (4, 1));
    }

    #[test]
    fn apply_step_errors() {
        let p = prompt(3, 100, 2, &["+1", "*2"]);
        assert!(matches!(
            apply_step(&p, &p.initial_state(), 2),
            Err(Error::ActionOutOfRange { action: 2, vocab_size: 2 })
        ));
        let exhausted = state(&p, 5, 2);
        assert!(matches!(apply_step(&p, &exhausted, 0), Err(Error::TerminalState { .. })));
    }

    #[test]
    fn terminal_conditions() {
        let p = prompt(3, 12, 4, &["+1", "*2"]);
        assert!(is_terminal(&p, &state(&p, 12, 1)));
        assert!(is_terminal(&p, &state(&p, 7, 4)));
        assert!(!is_terminal(&p, &state(&p, 7, 2)));
    }

    #[test]
    fn check_answer_cases() {
        let p = prompt(3, 12, 4, &["+1", "*2"]);
        assert_eq!(check_answer(&p, &[1, 1]).unwrap(), Outcome { correct: true, steps_used: 2 });
        assert!(!check_answer(&p, &[0]).unwrap().correct);
        let same = prompt(5, 5, 4, &["+1", "*2"]);
        assert_eq!(check_answer(&same, &[]).unwrap(), Outcome { correct: true, steps_used: 0 });
        assert!(check_answer(&p, &[0, 7]).is_err());
        assert!(check_answer(&p, &[0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn oracle_examples() {
        let p = prompt(3, 12, 3, &["+1", "*2"]);
        assert_eq!(oracle_distance(&p, &p.initial_state()), Some(2));
        let q = prompt(5, 4, 3, &["+1", "*2"]);
        assert_eq!(oracle_distance(&q, &q.initial_state()), None);
        assert_eq!(oracle_distance(&p, &state(&p, 12, 1)), Some(0));
    }

    #[test]
    fn synthesis_contract() {
        let cfg = EnvConfig {
            start_min: 1,
            start_max: 5,
            target_min: 6,
            target_max: 30,
            budget: 4,
            op_vocab: default_op_vocab(),
        };
        let one = synthesize_prompts(&cfg, 1, 0, 11).unwrap();
        assert_eq!(one.len(), 1);
        assert!(oracle_distance(&one[0], &one[0].initial_state()).is_some());
        assert!(synthesize_prompts(&cfg, 0, 0, 11).is_err());
        let a = synthesize_prompts(&cfg, 50, 0, 99).unwrap();
        let b = synthesize_prompts(&cfg, 50, 0, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| oracle_distance(p, &p.initial_state()).is_some()));
        assert_eq!(a.iter().map(|p| p.id).collect::<Vec<_>>(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn synthesis_failure_is_reported() {
        // Only +2 from odd starts can never reach an even target.
        let cfg = EnvConfig {
            start_min: 1,
            start_max: 1,
            target_min: 4,
            target_max: 4,
            budget: 3,
            op_vocab: vec![Op::Add(2)],
        };
        assert!(matches!(
            synthesize_prompts(&cfg, 1, 0, 0),
            Err(Error::SynthesisFailed { attempts: MAX_SYNTH_ATTEMPTS, .. })
        ));
    }

    /// Exhaustive enumeration of every op sequence up to the remaining budget.
    fn enumerate_min_steps(p: &Prompt, s: &EnvState) -> Option<u32> {
        fn go(p: &Prompt, x: i64, depth: u32, left: u32, best: &mut Option<u32>) {
            if x == p.target {
                *best = Some(best.map_or(depth, |b| b.min(depth)));
                return;
            }
            if left == 0 {
                return;
            }
            for op in &p.op_vocab {
                if let Some(y) = op.apply(x) {
                    go(p, y, depth + 1, left - 1, best);
                }
            }
        }
        let mut best = None;
        go(p, s.current, 0, s.remaining(p), &mut best);
        best
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![(-3i64..=4).prop_map(Op::Add), (-2i64..=3).prop_map(Op::Mul)]
    }

    proptest! {
        #[test]
        fn oracle_matches_enumeration(
            ops in proptest::collection::vec(arb_op(), 1..=5),
            start in -10i64..=20,
            target in -10i64..=60,
            budget in 1u32..=6,
            taken in 0u32..=6,
        ) {
            let mut vocab = Vec::new();
            for op in ops {
                if !vocab.contains(&op) { vocab.push(op); }
            }
            let p = Prompt::new(1, start, target, budget, vocab).unwrap();
            let s = EnvState { prompt_id: 1, current: start, steps_taken: taken.min(budget) };
            prop_assert_eq!(oracle_distance(&p, &s), enumerate_min_steps(&p, &s));
        }

        #[test]
        fn check_answer_is_pure(steps in proptest::collection::vec(0usize..5, 0..=4)) {
            let p = Prompt::new(0, 2, 17, 4, default_op_vocab()).unwrap();
            let a = check_answer(&p, &steps).ok();
            let b = check_answer(&p, &steps).ok();
            prop_assert_eq!(a, b);
        }
    }
}
