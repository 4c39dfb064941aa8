//! UCT-based tree search over explorer-generated reasoning steps.
//!
//! Each rollout descends from the root to a terminal node: selection follows
//! the UCT rule (unvisited children first, then argmax of Q plus the
//! exploration bonus, ties by child ordinal), a node is expanded with up to
//! `k` generator samples the first time it is selected, and the terminal's
//! binary reward is backpropagated along the descent path as a running mean.
//!
//! A node is terminal when its step carries an explicit final-answer marker,
//! when expansion yields no usable candidates, or when it sits at the depth
//! limit; the verifier decides the reward from the accumulated path text in
//! every case.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{answers_equivalent, canonicalize, extract_final_answer, has_final_marker};
use crate::client::{ChatMessage, ChatRequest, ClientError, ModelClient, RequestTag};
use crate::record::{content_id, NodeId, Problem, Step, Trajectory, TreeNode, TreeRecord};
use crate::segment::{segment, SegmentationConfig};
use crate::template::{render, TemplateError, TemplateSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub c_puct: f64,
    pub max_depth: u32,
    pub actions_per_node: usize,
    pub rollouts: u32,
    pub rng_seed: u64,
    /// Sampling temperature for expansion requests.
    pub expansion_temperature: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            c_puct: 1.4,
            max_depth: 16,
            actions_per_node: 3,
            rollouts: 10,
            rng_seed: 0,
            expansion_temperature: 0.8,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.c_puct <= 0.0 {
            return Err(format!("c_puct must be positive, got {}", self.c_puct));
        }
        if self.max_depth == 0 {
            return Err("max_depth must be >= 1".into());
        }
        if self.actions_per_node == 0 {
            return Err("actions_per_node must be >= 1".into());
        }
        if self.rollouts == 0 {
            return Err("rollouts must be >= 1".into());
        }
        if self.expansion_temperature < 0.0 {
            return Err("expansion_temperature must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("node {0} has no children during selection")]
    NoChildren(NodeId),
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
}

/// Decides the binary terminal reward for a candidate answer text.
pub trait AnswerVerifier: Sync {
    fn is_correct(&self, answer_text: &str, problem: &Problem) -> bool;
}

/// Math verifier: extracted final answer must be equivalent to gold.
pub struct MathVerifier;

impl AnswerVerifier for MathVerifier {
    fn is_correct(&self, answer_text: &str, problem: &Problem) -> bool {
        match extract_final_answer(answer_text) {
            Some(ans) => answers_equivalent(&ans, &canonicalize(&problem.gold_answer)),
            None => false,
        }
    }
}

/// Binary terminal reward for an answer text.
pub fn terminal_reward(answer_text: &str, problem: &Problem, verifier: &dyn AnswerVerifier) -> u8 {
    u8::from(verifier.is_correct(answer_text, problem))
}

/// Explorer-side generator handle: model client plus decoding parameters.
pub struct Explorer<'a> {
    pub client: &'a ModelClient,
    pub model: String,
    pub max_output_tokens: u32,
    pub templates: &'a TemplateSet,
}

/// Build the expansion request for (problem, prefix). The prompt embeds the
/// concatenated prefix step texts, so distinct prefixes fingerprint apart.
pub fn build_explore_request(
    problem: &Problem,
    prefix: &[Step],
    explorer: &Explorer,
    temperature: f64,
) -> Result<ChatRequest, TemplateError> {
    let prefix_text: String = prefix.iter().map(|s| s.text.as_str()).collect();
    let user = render(
        &explorer.templates.explore_user,
        &[("PROBLEM", problem.statement.as_str()), ("PREFIX", prefix_text.as_str())],
    )?;
    Ok(ChatRequest {
        messages: vec![
            ChatMessage::system(explorer.templates.explore_system.clone()),
            ChatMessage::user(user),
        ],
        temperature,
        max_output_tokens: explorer.max_output_tokens,
        model_name: explorer.model.clone(),
        request_tag: RequestTag::Explore,
    })
}

pub struct SearchTree {
    pub problem_id: String,
    pub root: NodeId,
    pub nodes: Vec<TreeNode>,
    pub completed_rollouts: u32,
    pub aborted_rollouts: u32,
    pub flags: Vec<String>,
}

impl SearchTree {
    pub fn into_record(self) -> TreeRecord {
        TreeRecord {
            problem_id: self.problem_id,
            root: self.root,
            nodes: self.nodes,
            completed_rollouts: self.completed_rollouts,
            aborted_rollouts: self.aborted_rollouts,
            flags: self.flags,
        }
    }
}

/// UCT selection among the children of `node`: any unvisited child first (by
/// ordinal), otherwise argmax of Q(c) + c_puct * sqrt(ln N(node) / N(c)),
/// ties broken by child ordinal.
pub fn uct_select(nodes: &[TreeNode], node: NodeId, c_puct: f64) -> Result<NodeId, SearchError> {
    let parent = &nodes[node];
    if parent.children.is_empty() {
        return Err(SearchError::NoChildren(node));
    }
    for &c in &parent.children {
        if nodes[c].visits == 0 {
            return Ok(c);
        }
    }
    let ln_parent = (parent.visits as f64).ln();
    let mut best = parent.children[0];
    let mut best_score = f64::NEG_INFINITY;
    for &c in &parent.children {
        let child = &nodes[c];
        let score = child.q() + c_puct * (ln_parent / child.visits as f64).sqrt();
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    Ok(best)
}

/// The UCT score itself, exposed for oracle comparisons.
pub fn uct_score(parent_visits: u64, child_visits: u64, child_q: f64, c_puct: f64) -> f64 {
    child_q + c_puct * ((parent_visits as f64).ln() / child_visits as f64).sqrt()
}

/// Whitespace-normalized form used to deduplicate candidate steps.
fn dedup_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct SearchRun<'a> {
    problem: &'a Problem,
    explorer: &'a Explorer<'a>,
    cfg: &'a SearchConfig,
    seg_cfg: &'a SegmentationConfig,
    verifier: &'a dyn AnswerVerifier,
    nodes: Vec<TreeNode>,
    flags: Vec<String>,
}

impl<'a> SearchRun<'a> {
    fn path_text(&self, node: NodeId) -> String {
        let mut ids = Vec::new();
        let mut cur = Some(node);
        while let Some(id) = cur {
            ids.push(id);
            cur = self.nodes[id].parent;
        }
        ids.reverse();
        ids.iter()
            .filter_map(|&id| self.nodes[id].step.as_ref())
            .map(|s| s.text.as_str())
            .collect()
    }

    fn ensure_terminal_reward(&mut self, node: NodeId) {
        if self.nodes[node].terminal_reward.is_none() {
            let text = self.path_text(node);
            let r = terminal_reward(&text, self.problem, self.verifier);
            self.nodes[node].terminal_reward = Some(r);
        }
    }

    /// Sample up to k candidate next steps and attach deduplicated children.
    fn expand(&mut self, node: NodeId) -> Result<usize, ClientError> {
        let prefix: Vec<Step> = {
            let mut ids = Vec::new();
            let mut cur = Some(node);
            while let Some(id) = cur {
                ids.push(id);
                cur = self.nodes[id].parent;
            }
            ids.reverse();
            ids.iter()
                .filter_map(|&id| self.nodes[id].step.clone())
                .collect()
        };
        let req = build_explore_request(
            self.problem,
            &prefix,
            self.explorer,
            self.cfg.expansion_temperature,
        )
        .map_err(|e| ClientError::InvalidRequest(e.to_string()))?;

        let mut seen = Vec::new();
        let mut created = 0usize;
        let depth = self.nodes[node].depth + 1;
        for _ in 0..self.cfg.actions_per_node {
            let raw = self.explorer.client.complete(&req)?;
            let seg = segment(&raw, self.seg_cfg);
            if seg.unbalanced_math() {
                self.flags
                    .push(format!("unbalanced math span in expansion at node {node}"));
            }
            let Some(first) = seg.steps.first() else {
                continue;
            };
            let text = first.text.clone();
            if text.trim().is_empty() {
                continue;
            }
            let key = dedup_key(&text);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let id = self.nodes.len();
            let step = Step {
                text,
                index: (depth - 1) as usize,
                boundary_kind: first.boundary_kind,
            };
            let terminal = has_final_marker(&step.text) || depth >= self.cfg.max_depth;
            self.nodes.push(TreeNode {
                id,
                parent: Some(node),
                step: Some(step),
                visits: 0,
                value_sum: 0.0,
                children: Vec::new(),
                depth,
                terminal,
                terminal_reward: None,
            });
            self.nodes[node].children.push(id);
            created += 1;
        }
        Ok(created)
    }

    /// One root-to-terminal descent with backpropagation. Returns false when
    /// the generator failed and the rollout was aborted.
    fn rollout(&mut self) -> Result<bool, SearchError> {
        let mut path = vec![0usize];
        let mut cur = 0usize;
        loop {
            if self.nodes[cur].terminal {
                break;
            }
            let expanded = self.nodes[cur].terminal || !self.nodes[cur].children.is_empty();
            if !expanded {
                match self.expand(cur) {
                    Ok(0) => {
                        // Generator exhausted: treat like a depth truncation.
                        self.nodes[cur].terminal = true;
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => {
                        self.flags.push(format!("generator failure: {e}"));
                        return Ok(false);
                    }
                }
            }
            let next = uct_select(&self.nodes, cur, self.cfg.c_puct)?;
            path.push(next);
            cur = next;
        }
        self.ensure_terminal_reward(cur);
        let r = self.nodes[cur].terminal_reward.expect("just computed") as f64;
        for id in path {
            self.nodes[id].visits += 1;
            self.nodes[id].value_sum += r;
        }
        Ok(true)
    }
}

/// Run the full search for one problem.
pub fn run_search(
    problem: &Problem,
    explorer: &Explorer,
    cfg: &SearchConfig,
    seg_cfg: &SegmentationConfig,
    verifier: &dyn AnswerVerifier,
) -> Result<SearchTree, SearchError> {
    let root = TreeNode {
        id: 0,
        parent: None,
        step: None,
        visits: 0,
        value_sum: 0.0,
        children: Vec::new(),
        depth: 0,
        terminal: false,
        terminal_reward: None,
    };
    let mut run = SearchRun {
        problem,
        explorer,
        cfg,
        seg_cfg,
        verifier,
        nodes: vec![root],
        flags: Vec::new(),
    };
    let mut completed = 0u32;
    let mut aborted = 0u32;
    for _ in 0..cfg.rollouts {
        if run.rollout()? {
            completed += 1;
        } else {
            aborted += 1;
        }
    }
    Ok(SearchTree {
        problem_id: problem.id.clone(),
        root: 0,
        nodes: run.nodes,
        completed_rollouts: completed,
        aborted_rollouts: aborted,
        flags: run.flags,
    })
}

/// One trajectory per terminal leaf reached by at least one rollout.
///
/// `accumulated_visits` sums N(s) over the path with the root excluded (root
/// N is constant across a problem's trajectories and carries no contrast
/// signal); `max_node_q` is the maximum Q over the same non-root nodes.
pub fn extract_trajectories(tree: &TreeRecord) -> Vec<Trajectory> {
    let mut out = Vec::new();
    for node in &tree.nodes {
        if !node.terminal || node.visits == 0 {
            continue;
        }
        let Some(reward) = node.terminal_reward else {
            continue;
        };
        let mut ids = Vec::new();
        let mut cur = Some(node.id);
        while let Some(id) = cur {
            ids.push(id);
            cur = tree.nodes[id].parent;
        }
        ids.reverse();
        let steps: Vec<Step> = ids
            .iter()
            .filter_map(|&id| tree.nodes[id].step.clone())
            .enumerate()
            .map(|(i, mut s)| {
                s.index = i;
                s
            })
            .collect();
        if steps.is_empty() {
            continue;
        }
        let non_root = &ids[1..];
        let accumulated_visits: u64 = non_root.iter().map(|&id| tree.nodes[id].visits).sum();
        let max_node_q = non_root
            .iter()
            .map(|&id| tree.nodes[id].q())
            .fold(0.0f64, f64::max);
        let path_key = ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join("-");
        let id = content_id(format!("traj:{}:{}", tree.problem_id, path_key));
        let length = steps.len();
        out.push(Trajectory {
            id,
            problem_id: tree.problem_id.clone(),
            steps,
            reward,
            node_path: ids,
            accumulated_visits,
            max_node_q,
            length,
        });
    }
    out
}
