//! Fixtures and independent oracles shared by the integration suites.
//!
//! Nothing in here calls the code under test to produce an expected value;
//! every oracle is an enumeration or closed form written from scratch.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cpl_core::env::{apply_step, default_op_vocab, is_terminal, Prompt};
use cpl_core::mcts::{MctsConfig, NodeRecord, SearchTree, TreeHeader, UcbVariant};
use cpl_core::pairs::{PairBuffer, PairKind, Trajectory, TrajectoryPair};
use cpl_core::policy::{LinearSoftmaxPolicy, PolicyParams, FEATURE_DIM};
use cpl_core::PromptMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_policy(rng: &mut impl Rng, vocab: usize, scale: f64) -> LinearSoftmaxPolicy {
    let theta = (0..vocab * FEATURE_DIM).map(|_| rng.random_range(-scale..scale)).collect();
    LinearSoftmaxPolicy::new(PolicyParams::from_theta(theta, vocab).unwrap()).unwrap()
}

pub fn random_prompt(rng: &mut impl Rng, id: u64) -> Prompt {
    Prompt::new(id, rng.random_range(1..=5), rng.random_range(6..=30), 4, default_op_vocab()).unwrap()
}

/// A uniformly random legal step sequence; stops early if the episode ends.
pub fn random_steps(rng: &mut impl Rng, prompt: &Prompt, max_len: usize) -> Vec<usize> {
    let mut state = prompt.initial_state();
    let mut steps = Vec::new();
    while steps.len() < max_len && !is_terminal(prompt, &state) {
        let a = rng.random_range(0..prompt.vocab_size());
        state = apply_step(prompt, &state, a).unwrap();
        steps.push(a);
    }
    steps
}

pub fn trajectory(prompt: &Prompt, steps: Vec<usize>, value: f64) -> Trajectory {
    let mut state = prompt.initial_state();
    for &a in &steps {
        state = apply_step(prompt, &state, a).unwrap();
    }
    Trajectory {
        prompt_id: prompt.id,
        complete: is_terminal(prompt, &state),
        steps,
        value,
    }
}

/// Random pairs over `num_prompts` prompts. Weights may tie.
pub fn random_buffer(rng: &mut impl Rng, num_prompts: usize, max_pairs: usize) -> (PairBuffer, PromptMap) {
    let prompts: Vec<Prompt> = (0..num_prompts as u64).map(|i| random_prompt(rng, i * 3 + 1)).collect();
    let mut buffer = PairBuffer::new();
    for p in &prompts {
        for _ in 0..rng.random_range(1..=max_pairs) {
            let lw = rng.random_range(0..=4);
            let ll = rng.random_range(0..=4);
            let w = trajectory(p, random_steps(rng, p, lw), rng.random_range(0.5..1.0));
            let l = trajectory(p, random_steps(rng, p, ll), rng.random_range(0.0..0.5));
            buffer.push(TrajectoryPair {
                prompt_id: p.id,
                gap: w.value - l.value,
                winner: w,
                loser: l,
                kind: if rng.random_bool(0.5) { PairKind::Stepwise } else { PairKind::Complete },
            });
        }
    }
    let map = prompts.into_iter().map(|p| (p.id, p)).collect();
    (buffer, map)
}

/// A random tree shape with arbitrary statistics. Siblings take distinct
/// actions; terminal nodes never have children; some nodes are unvisited.
pub fn random_tree(rng: &mut impl Rng, prompt_id: u64) -> SearchTree {
    let mut records = vec![NodeRecord {
        id: 0,
        parent: None,
        action: None,
        current: 1,
        steps_taken: 0,
        n: 1,
        w: rng.random_range(0.0..1.0),
        v_est: 0.5,
        terminal: false,
    }];
    let mut frontier = vec![0usize];
    while let Some(parent) = frontier.pop() {
        if records.len() > 40 {
            break;
        }
        let depth = records[parent].steps_taken;
        let k = rng.random_range(0..=4usize);
        let mut actions: Vec<usize> = (0..5).collect();
        for i in 0..k {
            let j = rng.random_range(i..5);
            actions.swap(i, j);
            let id = records.len();
            // quantized values make exact-threshold gaps likely
            let w = f64::from(rng.random_range(0..=20u32)) * 0.05;
            let terminal = depth + 1 >= 4 || rng.random_bool(0.3);
            records.push(NodeRecord {
                id,
                parent: Some(parent),
                action: Some(actions[i]),
                current: 1,
                steps_taken: depth + 1,
                n: if rng.random_bool(0.15) { 0 } else { rng.random_range(1..6) },
                w,
                v_est: w,
                terminal,
            });
            if !terminal {
                frontier.push(id);
            }
        }
    }
    let header = TreeHeader {
        prompt_id,
        config: MctsConfig {
            c_explore: 1.0,
            num_simulations: 1,
            max_children: 5,
            ucb_variant: UcbVariant::LogRatio,
            seed: 0,
        },
    };
    SearchTree::from_records(header, records).unwrap()
}

pub type PairKey = (u64, Vec<usize>, Vec<usize>);

fn path(records: &[(Option<usize>, Option<usize>)], mut id: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while let (Some(p), Some(a)) = records[id] {
        out.push(a);
        id = p;
    }
    out.reverse();
    out
}

/// Brute force over every node pair of every tree: siblings with a value
/// gap above `tau` are stepwise pairs, visited terminal leaves with a gap
/// above `tau` are complete pairs. Where a pair qualifies both ways the
/// stepwise label wins.
pub fn brute_force_pairs(trees: &[SearchTree], tau: f64, with_stepwise: bool) -> BTreeMap<PairKey, PairKind> {
    let mut out = BTreeMap::new();
    for tree in trees {
        let (_, records) = tree.to_records();
        let links: Vec<(Option<usize>, Option<usize>)> = records.iter().map(|r| (r.parent, r.action)).collect();
        let mut complete = Vec::new();
        let mut stepwise = Vec::new();
        for a in &records {
            for b in &records {
                if a.id >= b.id || a.n == 0 || b.n == 0 {
                    continue;
                }
                let (hi, lo) = if a.w > b.w { (a, b) } else { (b, a) };
                if hi.w - lo.w <= tau {
                    continue;
                }
                let key = (tree.prompt_id, path(&links, hi.id), path(&links, lo.id));
                if a.parent.is_some() && a.parent == b.parent {
                    stepwise.push(key.clone());
                }
                if a.terminal && b.terminal {
                    complete.push(key);
                }
            }
        }
        for k in complete {
            out.insert(k, PairKind::Complete);
        }
        if with_stepwise {
            for k in stepwise {
                out.insert(k, PairKind::Stepwise);
            }
        }
    }
    out
}

pub fn buffer_keys(buffer: &PairBuffer) -> BTreeMap<PairKey, PairKind> {
    buffer
        .pairs()
        .iter()
        .map(|p| ((p.prompt_id, p.winner.steps.clone(), p.loser.steps.clone()), p.kind))
        .collect()
}

/// The selection score written out directly from its definition.
pub fn scripted_ucb(w: f64, n: u64, parent: u64, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let ratio = parent as f64 / n as f64;
    w + c * (2.0 * ratio.ln()).sqrt()
}

/// Central differences of `f` at `theta`.
pub fn central_differences(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let up = f(&x);
            x[i] = theta[i] - h;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors (0 when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// `x == m * 2^e` with an integer mantissa.
fn dyadic(x: f64) -> (i128, i32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i128;
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    if exp == 0 {
        (sign * frac, -1074)
    } else {
        (sign * (frac | (1i128 << 52)), exp - 1075)
    }
}

/// True when `r` is the double nearest to the exact rational
/// `(v - lo) / (hi - lo)` computed from the bit patterns of the inputs.
/// Inputs must be normal doubles of similar magnitude.
pub fn is_correctly_rounded_minmax(v: f64, lo: f64, hi: f64, r: f64) -> bool {
    let parts = [dyadic(v), dyadic(lo), dyadic(hi)];
    let e0 = parts.iter().map(|p| p.1).min().unwrap();
    let scaled: Vec<i128> = parts.iter().map(|&(m, e)| m << (e - e0)).collect();
    let num = scaled[0] - scaled[1];
    let den = scaled[2] - scaled[1];
    let (rm, re) = dyadic(r);
    assert!(re < 0 && den > 0 && num >= 0);
    // |num/den - rm 2^re| <= 2^re / 2  <=>  |2 num 2^-re - 2 rm den| <= den
    let lhs = (2 * (num << -re) - 2 * rm * den).abs();
    // a normal double's ulp is 2^re only when its mantissa is full width
    assert!(rm >= 1i128 << 52);
    lhs <= den
}
