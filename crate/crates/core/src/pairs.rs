//! Preference-pair mining from search trees.
//!
//! Only visited nodes (`n >= 1`) take part: an unvisited child has no
//! backed-up value yet.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::env::{is_terminal, replay, Prompt};
use crate::error::{Error, Result};
use crate::mcts::SearchTree;

/// A (possibly partial) step sequence for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub steps: Vec<usize>,
    pub complete: bool,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Stepwise,
    Complete,
    Depthwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub prompt_id: u64,
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub kind: PairKind,
    pub gap: f64,
}

impl TrajectoryPair {
    /// Orders two trajectories by value; `None` when they tie.
    fn ordered(prompt_id: u64, a: Trajectory, b: Trajectory, kind: PairKind) -> Option<Self> {
        let (winner, loser) = if a.value > b.value {
            (a, b)
        } else if b.value > a.value {
            (b, a)
        } else {
            return None;
        };
        Some(TrajectoryPair {
            prompt_id,
            gap: winner.value - loser.value,
            winner,
            loser,
            kind,
        })
    }

    pub fn to_record(&self) -> PairRecord {
        PairRecord {
            prompt_id: self.prompt_id,
            kind: self.kind,
            gap: self.gap,
            winner_steps: self.winner.steps.clone(),
            loser_steps: self.loser.steps.clone(),
            winner_value: self.winner.value,
            loser_value: self.loser.value,
        }
    }

    /// Rebuilds a pair from its record; completeness is recovered by
    /// replaying both step lists on the prompt.
    pub fn from_record(record: PairRecord, prompt: &Prompt) -> Result<Self> {
        if record.prompt_id != prompt.id {
            return Err(Error::InvalidInput(format!(
                "pair for prompt {} replayed on prompt {}",
                record.prompt_id, prompt.id
            )));
        }
        let complete = |steps: &[usize]| -> Result<bool> {
            let states = replay(prompt, steps)?;
            Ok(is_terminal(prompt, states.last().expect("initial state")))
        };
        Ok(TrajectoryPair {
            prompt_id: record.prompt_id,
            winner: Trajectory {
                prompt_id: record.prompt_id,
                complete: complete(&record.winner_steps)?,
                steps: record.winner_steps,
                value: record.winner_value,
            },
            loser: Trajectory {
                prompt_id: record.prompt_id,
                complete: complete(&record.loser_steps)?,
                steps: record.loser_steps,
                value: record.loser_value,
            },
            kind: record.kind,
            gap: record.gap,
        })
    }
}

/// JSONL form of a [`TrajectoryPair`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub prompt_id: u64,
    pub kind: PairKind,
    pub gap: f64,
    pub winner_steps: Vec<usize>,
    pub loser_steps: Vec<usize>,
    pub winner_value: f64,
    pub loser_value: f64,
}

/// Sibling pairs whose backed-up values differ by more than `tau`.
pub fn extract_stepwise_pairs(tree: &SearchTree, tau: f64) -> Vec<TrajectoryPair> {
    let mut out = Vec::new();
    for node in &tree.nodes {
        let kids: Vec<usize> = node.children.iter().copied().filter(|&c| tree.node(c).n > 0).collect();
        for (i, &a) in kids.iter().enumerate() {
            for &b in &kids[i + 1..] {
                if (tree.node(a).w - tree.node(b).w).abs() <= tau {
                    continue;
                }
                out.extend(TrajectoryPair::ordered(
                    tree.prompt_id,
                    tree.trajectory(a),
                    tree.trajectory(b),
                    PairKind::Stepwise,
                ));
            }
        }
    }
    out
}

/// Pairs of complete (terminal) trajectories separated by more than `tau`.
pub fn extract_complete_pairs(tree: &SearchTree, tau: f64) -> Vec<TrajectoryPair> {
    let leaves: Vec<usize> = tree.terminal_leaves().map(|n| n.id).collect();
    let mut out = Vec::new();
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            if (tree.node(a).w - tree.node(b).w).abs() <= tau {
                continue;
            }
            out.extend(TrajectoryPair::ordered(
                tree.prompt_id,
                tree.trajectory(a),
                tree.trajectory(b),
                PairKind::Complete,
            ));
        }
    }
    out
}

/// Highest-`w` versus lowest-`w` node at each depth below the root.
pub fn extract_depthwise_pairs(tree: &SearchTree) -> Vec<TrajectoryPair> {
    let mut by_depth: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for node in tree.nodes.iter().filter(|n| n.n > 0 && n.parent.is_some()) {
        by_depth.entry(tree.depth(node.id)).or_default().push(node.id);
    }
    let mut out = Vec::new();
    for ids in by_depth.values() {
        if ids.len() < 2 {
            continue;
        }
        let mut hi = ids[0];
        let mut lo = ids[0];
        for &id in &ids[1..] {
            if tree.node(id).w > tree.node(hi).w {
                hi = id;
            }
            if tree.node(id).w < tree.node(lo).w {
                lo = id;
            }
        }
        out.extend(TrajectoryPair::ordered(
            tree.prompt_id,
            tree.trajectory(hi),
            tree.trajectory(lo),
            PairKind::Depthwise,
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Stepwise and complete pairs.
    #[default]
    Both,
    CompleteOnly,
    /// Per-depth max/min pairs.
    Depthwise,
}

/// Offline replay buffer of preference pairs, indexed by prompt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBuffer {
    pairs: Vec<TrajectoryPair>,
    by_prompt: BTreeMap<u64, Vec<usize>>,
    seen: HashSet<(u64, Vec<usize>, Vec<usize>)>,
}

impl PairBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pair unless the same (winner, loser) step lists are already
    /// present for its prompt. Returns whether it was added.
    pub fn push(&mut self, pair: TrajectoryPair) -> bool {
        let key = (pair.prompt_id, pair.winner.steps.clone(), pair.loser.steps.clone());
        if !self.seen.insert(key) {
            return false;
        }
        self.by_prompt.entry(pair.prompt_id).or_default().push(self.pairs.len());
        self.pairs.push(pair);
        true
    }

    pub fn pairs(&self) -> &[TrajectoryPair] {
        &self.pairs
    }

    pub fn get(&self, index: usize) -> &TrajectoryPair {
        &self.pairs[index]
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair indices per prompt, in ascending prompt id.
    pub fn by_prompt(&self) -> &BTreeMap<u64, Vec<usize>> {
        &self.by_prompt
    }

    pub fn count_kind(&self, kind: PairKind) -> usize {
        self.pairs.iter().filter(|p| p.kind == kind).count()
    }

    pub fn to_records(&self) -> Vec<PairRecord> {
        self.pairs.iter().map(TrajectoryPair::to_record).collect()
    }
}

impl FromIterator<TrajectoryPair> for PairBuffer {
    fn from_iter<I: IntoIterator<Item = TrajectoryPair>>(iter: I) -> Self {
        let mut buf = PairBuffer::new();
        for p in iter {
            buf.push(p);
        }
        buf
    }
}

pub fn extract_tree_pairs(tree: &SearchTree, tau: f64, mode: BufferMode) -> Vec<TrajectoryPair> {
    match mode {
        BufferMode::Both => {
            let mut v = extract_stepwise_pairs(tree, tau);
            v.extend(extract_complete_pairs(tree, tau));
            v
        }
        BufferMode::CompleteOnly => extract_complete_pairs(tree, tau),
        BufferMode::Depthwise => extract_depthwise_pairs(tree),
    }
}

/// Concatenates per-tree extractions in tree order and deduplicates.
pub fn build_buffer(trees: &[SearchTree], tau: f64, mode: BufferMode) -> Result<PairBuffer> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
    }
    Ok(trees.iter().flat_map(|t| extract_tree_pairs(t, tau, mode)).collect())
}
