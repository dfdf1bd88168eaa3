//! Value-guided Monte Carlo tree search over the step space of one prompt.
//!
//! Each simulation descends from the root by maximum UCB score, expands the
//! first leaf it reaches by sampling up to `max_children` distinct actions
//! from the policy, evaluates exactly one new (or terminal) node with the
//! value model, and backs that value up to the root. There is no rollout
//! phase. The root carries one extra visit from its own evaluation, so every
//! expanded node satisfies `n == 1 + sum(children n)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{apply_step, is_terminal, EnvState, Prompt};
use crate::error::{Error, Result};
use crate::pairs::Trajectory;
use crate::policy::Policy;
use crate::value::ValueModel;

/// Resampling attempts for a duplicate action during expansion.
pub const DUPLICATE_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UcbVariant {
    /// `w + C * sqrt(2 * ln(N / n))`
    #[default]
    LogRatio,
    /// `w + C * sqrt(ln(N) / n)`
    Uct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MctsConfig {
    pub c_explore: f64,
    pub num_simulations: usize,
    pub max_children: usize,
    #[serde(default)]
    pub ucb_variant: UcbVariant,
    pub seed: u64,
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_explore >= 0.0 && self.c_explore.is_finite()) {
            return Err(Error::InvalidInput(format!("c_explore must be >= 0, got {}", self.c_explore)));
        }
        if self.num_simulations == 0 {
            return Err(Error::InvalidInput("num_simulations must be >= 1".into()));
        }
        if self.max_children == 0 {
            return Err(Error::InvalidInput("max_children must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn ucb_score(w: f64, n: u64, parent_visits: u64, c_explore: f64, variant: UcbVariant) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let (big_n, n) = (parent_visits as f64, n as f64);
    match variant {
        UcbVariant::LogRatio => w + c_explore * (2.0 * (big_n / n).ln()).sqrt(),
        UcbVariant::Uct => w + c_explore * (big_n.ln() / n).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub action: Option<usize>,
    pub state: EnvState,
    pub n: u64,
    pub w: f64,
    pub v_est: f64,
    pub children: Vec<usize>,
    pub terminal: bool,
}

/// Nodes are stored by id; children of one node always have consecutive,
/// increasing ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub prompt_id: u64,
    pub config: MctsConfig,
    pub nodes: Vec<TreeNode>,
}

impl SearchTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    fn push_node(&mut self, parent: Option<usize>, action: Option<usize>, state: EnvState, v_est: f64, terminal: bool) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            parent,
            action,
            state,
            n: 0,
            w: 0.0,
            v_est,
            children: Vec::new(),
            terminal,
        });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }

    /// Running-mean update of `w` and `n` on the leaf and every ancestor.
    pub fn backpropagate(&mut self, leaf: usize, value: f64) {
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            let node = &mut self.nodes[id];
            node.w = (node.w * node.n as f64 + value) / (node.n + 1) as f64;
            node.n += 1;
            cur = node.parent;
        }
    }

    /// Actions along the root-to-node path.
    pub fn path_actions(&self, id: usize) -> Vec<usize> {
        let mut steps = Vec::new();
        let mut cur = &self.nodes[id];
        while let (Some(a), Some(p)) = (cur.action, cur.parent) {
            steps.push(a);
            cur = &self.nodes[p];
        }
        steps.reverse();
        steps
    }

    pub fn depth(&self, id: usize) -> usize {
        self.nodes[id].state.steps_taken as usize
    }

    pub fn trajectory(&self, id: usize) -> Trajectory {
        let node = &self.nodes[id];
        Trajectory {
            prompt_id: self.prompt_id,
            steps: self.path_actions(id),
            complete: node.terminal,
            value: node.w,
        }
    }

    /// Visited terminal nodes in id order.
    pub fn terminal_leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.terminal && n.n > 0)
    }

    /// Path to the visited terminal leaf with the highest `w`; ties go to
    /// the lowest node id.
    pub fn best_trajectory(&self) -> Result<Trajectory> {
        let mut best: Option<&TreeNode> = None;
        for leaf in self.terminal_leaves() {
            if best.is_none_or(|b| leaf.w > b.w) {
                best = Some(leaf);
            }
        }
        best.map(|leaf| self.trajectory(leaf.id))
            .ok_or(Error::NoTrajectory { prompt_id: self.prompt_id })
    }

    fn select_child(&self, id: usize) -> usize {
        let parent = &self.nodes[id];
        let mut best = parent.children[0];
        let mut best_score = f64::NEG_INFINITY;
        for &c in &parent.children {
            let child = &self.nodes[c];
            let s = ucb_score(child.w, child.n, parent.n, self.config.c_explore, self.config.ucb_variant);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    pub fn to_records(&self) -> (TreeHeader, Vec<NodeRecord>) {
        let header = TreeHeader {
            prompt_id: self.prompt_id,
            config: self.config,
        };
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                parent: n.parent,
                action: n.action,
                current: n.state.current,
                steps_taken: n.state.steps_taken,
                n: n.n,
                w: n.w,
                v_est: n.v_est,
                terminal: n.terminal,
            })
            .collect();
        (header, nodes)
    }

    pub fn from_records(header: TreeHeader, records: Vec<NodeRecord>) -> Result<Self> {
        let mut tree = SearchTree {
            prompt_id: header.prompt_id,
            config: header.config,
            nodes: Vec::with_capacity(records.len()),
        };
        for (i, r) in records.into_iter().enumerate() {
            if r.id != i {
                return Err(Error::InvalidInput(format!("tree {}: node id {} out of order", header.prompt_id, r.id)));
            }
            match r.parent {
                None if i != 0 => {
                    return Err(Error::InvalidInput(format!("tree {}: node {i} has no parent", header.prompt_id)))
                }
                Some(p) if p >= i => {
                    return Err(Error::InvalidInput(format!("tree {}: node {i} precedes its parent", header.prompt_id)))
                }
                _ => {}
            }
            let state = EnvState {
                prompt_id: header.prompt_id,
                current: r.current,
                steps_taken: r.steps_taken,
            };
            let id = tree.push_node(r.parent, r.action, state, r.v_est, r.terminal);
            tree.nodes[id].n = r.n;
            tree.nodes[id].w = r.w;
        }
        if tree.nodes.is_empty() {
            return Err(Error::InvalidInput(format!("tree {} has no nodes", header.prompt_id)));
        }
        Ok(tree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeHeader {
    pub prompt_id: u64,
    pub config: MctsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub action: Option<usize>,
    pub current: i64,
    pub steps_taken: u32,
    pub n: u64,
    pub w: f64,
    pub v_est: f64,
    pub terminal: bool,
}

pub fn run_search<P: Policy>(prompt: &Prompt, policy: &P, value: &ValueModel, config: &MctsConfig) -> Result<SearchTree> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let root_state = prompt.initial_state();
    let mut tree = SearchTree {
        prompt_id: prompt.id,
        config: *config,
        nodes: Vec::new(),
    };
    let root_terminal = is_terminal(prompt, &root_state);
    let root = tree.push_node(None, None, root_state, value.state_value(prompt, &root_state), root_terminal);
    tree.backpropagate(root, tree.nodes[root].v_est);
    if root_terminal {
        return Ok(tree);
    }

    for _ in 0..config.num_simulations {
        let mut id = root;
        loop {
            let node = &tree.nodes[id];
            if node.terminal || node.n == 0 {
                break;
            }
            if node.children.is_empty() {
                expand(&mut tree, id, prompt, policy, value, &mut rng)?;
            }
            id = tree.select_child(id);
        }
        let v = tree.nodes[id].v_est;
        tree.backpropagate(id, v);
    }
    Ok(tree)
}

fn expand<P: Policy>(
    tree: &mut SearchTree,
    id: usize,
    prompt: &Prompt,
    policy: &P,
    value: &ValueModel,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let state = tree.nodes[id].state;
    let dist = policy.step_distribution(prompt, &state)?;
    let mut chosen: Vec<usize> = Vec::with_capacity(tree.config.max_children);
    for _ in 0..tree.config.max_children.min(prompt.vocab_size()) {
        for _ in 0..=DUPLICATE_RETRIES {
            let a = dist.sample(rng);
            if !chosen.contains(&a) {
                chosen.push(a);
                break;
            }
        }
    }
    for a in chosen {
        let child = apply_step(prompt, &state, a)?;
        let v_est = value.state_value(prompt, &child);
        tree.push_node(Some(id), Some(a), child, v_est, is_terminal(prompt, &child));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::default_op_vocab;
    use crate::policy::LinearSoftmaxPolicy;
    use crate::value::ValueConfig;
    use proptest::prelude::*;

    fn config(sims: usize, seed: u64) -> MctsConfig {
        MctsConfig {
            c_explore: 1.0,
            num_simulations: sims,
            max_children: 3,
            ucb_variant: UcbVariant::LogRatio,
            seed,
        }
    }

    fn search(start: i64, target: i64, sims: usize, seed: u64) -> SearchTree {
        let p = Prompt::new(1, start, target, 4, default_op_vocab()).unwrap();
        let vm = ValueModel::new(ValueConfig { noise_std: 0.05, seed: 3, ..ValueConfig::noiseless(0.9) }).unwrap();
        run_search(&p, &LinearSoftmaxPolicy::uniform(5), &vm, &config(sims, seed)).unwrap()
    }

    #[test]
    fn ucb_hand_value() {
        let s = ucb_score(0.5, 2, 8, 1.0, UcbVariant::LogRatio);
        assert!((s - (0.5 + (2.0 * 4f64.ln()).sqrt())).abs() < 1e-12);
        assert!((s - 2.165109).abs() < 1e-6);
        assert_eq!(ucb_score(0.3, 0, 8, 1.0, UcbVariant::LogRatio), f64::INFINITY);
        assert_eq!(ucb_score(0.3, 5, 8, 0.0, UcbVariant::LogRatio), 0.3);
        let uct = ucb_score(0.5, 2, 8, 1.0, UcbVariant::Uct);
        assert!((uct - (0.5 + (8f64.ln() / 2.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn backprop_running_mean() {
        let mut tree = search(3, 17, 1, 0);
        let leaf = tree.nodes.iter().find(|n| n.n == 1 && n.parent.is_some()).unwrap().id;
        tree.nodes[leaf].w = 0.4;
        let root_n = tree.root().n;
        tree.backpropagate(leaf, 0.8);
        assert_eq!(tree.nodes[leaf].n, 2);
        assert!((tree.nodes[leaf].w - 0.6).abs() < 1e-15);
        assert_eq!(tree.root().n, root_n + 1);

        let fresh = tree.nodes.iter().find(|n| n.n == 0).unwrap().id;
        tree.backpropagate(fresh, 0.7);
        assert_eq!(tree.nodes[fresh].n, 1);
        assert!((tree.nodes[fresh].w - 0.7).abs() < 1e-15);
    }

    #[test]
    fn simulation_count_conserved() {
        for seed in 0..20 {
            let tree = search(2, 23, 16, seed);
            let total: u64 = tree.root().children.iter().map(|&c| tree.nodes[c].n).sum();
            assert_eq!(total, 16);
            assert_eq!(tree.root().n, 17);
        }
    }

    #[test]
    fn terminal_root_is_single_node() {
        let tree = search(7, 7, 32, 0);
        assert_eq!(tree.nodes.len(), 1);
        assert!(tree.root().children.is_empty());
        assert!(tree.root().terminal);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(search(1, 29, 64, 5), search(1, 29, 64, 5));
        assert_ne!(search(1, 29, 64, 5), search(1, 29, 64, 6));
    }

    fn leaf_tree(ws: &[(f64, bool)]) -> SearchTree {
        let mut tree = search(1, 29, 1, 0);
        tree.nodes.truncate(1);
        tree.nodes[0].children.clear();
        for (i, &(w, terminal)) in ws.iter().enumerate() {
            let state = EnvState { prompt_id: 1, current: 2 + i as i64, steps_taken: 1 };
            let id = tree.push_node(Some(0), Some(i), state, w, terminal);
            tree.nodes[id].n = 1;
            tree.nodes[id].w = w;
        }
        tree
    }

    #[test]
    fn best_trajectory_rules() {
        let tree = leaf_tree(&[(0.2, true), (0.9, true), (0.95, false)]);
        let best = tree.best_trajectory().unwrap();
        assert_eq!(best.steps, vec![1]);
        assert_eq!(best.value, 0.9);

        let tied = leaf_tree(&[(0.5, false), (0.7, true), (0.7, true)]);
        assert_eq!(tied.best_trajectory().unwrap().steps, vec![1]);

        let none = leaf_tree(&[(0.5, false)]);
        assert!(matches!(none.best_trajectory(), Err(Error::NoTrajectory { prompt_id: 1 })));
    }

    #[test]
    fn records_roundtrip() {
        let tree = search(3, 26, 40, 2);
        let (h, r) = tree.to_records();
        assert_eq!(SearchTree::from_records(h, r).unwrap(), tree);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tree_invariants(start in 1i64..=5, target in 6i64..=30, sims in 1usize..80, seed in any::<u64>()) {
            let tree = search(start, target, sims, seed);
            for node in &tree.nodes {
                if node.n >= 1 {
                    prop_assert!((0.0..=1.0).contains(&node.w));
                }
                if !node.children.is_empty() {
                    let child_n: u64 = node.children.iter().map(|&c| tree.nodes[c].n).sum();
                    prop_assert_eq!(node.n, 1 + child_n);
                    for &c in &node.children {
                        prop_assert_eq!(tree.nodes[c].state.steps_taken, node.state.steps_taken + 1);
                        prop_assert_eq!(tree.nodes[c].parent, Some(node.id));
                    }
                }
            }
        }

        #[test]
        fn ucb_matches_scripted_formula(w in 0.0f64..1.0, c in 0.0f64..5.0, big_n in 1u64..10_000, frac in 0.0f64..1.0) {
            let n = ((big_n as f64 * frac) as u64).max(1);
            let scripted = w + c * (2.0 * (big_n as f64 / n as f64).ln()).sqrt();
            prop_assert!((ucb_score(w, n, big_n, c, UcbVariant::LogRatio) - scripted).abs() < 1e-9);
        }
    }
}
