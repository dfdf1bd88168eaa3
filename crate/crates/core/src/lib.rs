//! Search-guided policy self-improvement on a reach-target puzzle.
//!
//! The pipeline: synthesize prompts ([`env`]), run value-guided MCTS per
//! prompt ([`mcts`]), fine-tune the step policy ([`policy`]) on the best
//! trajectory of each tree, mine stepwise and complete preference pairs
//! ([`pairs`]), then run several offline DPO epochs ([`train`]) over a
//! curriculum that is re-ranked every epoch ([`cpl`]). [`orchestrator`]
//! wires the stages together and runs the baselines under identical
//! budgets; [`cli`] persists every stage to disk.

use std::collections::BTreeMap;

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod cpl;
pub mod env;
pub mod error;
pub mod mcts;
pub mod orchestrator;
pub mod pairs;
pub mod policy;
pub mod seed;
pub mod train;
pub mod value;

pub use error::{Error, Result};

/// Prompts keyed by id.
pub type PromptMap = BTreeMap<u64, env::Prompt>;

pub fn prompt_map<'a>(prompts: impl IntoIterator<Item = &'a env::Prompt>) -> PromptMap {
    prompts.into_iter().map(|p| (p.id, p.clone())).collect()
}
