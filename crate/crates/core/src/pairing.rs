//! Trajectory stratification and contrastive pair construction.
//!
//! The positive anchor is the shortest correct trajectory (ties: highest max
//! node Q, then lowest id). Hard negatives are incorrect trajectories drawn
//! with probability proportional to accumulated visit count; soft negatives
//! are correct but longer trajectories drawn uniformly. Hard negatives are
//! preferred, with soft negatives as the fallback when no incorrect
//! trajectory exists; an explicit hard fraction can override the mix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{content_id, ContrastPair, NegativeKind, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingConfig {
    pub pairs_per_problem: usize,
    /// When set, the target fraction of hard pairs; when unset, hard
    /// negatives are used whenever any exist.
    pub hard_fraction: Option<f64>,
    pub rng_seed: u64,
    pub anchor_rule: AnchorRule,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            pairs_per_problem: 10,
            hard_fraction: None,
            rng_seed: 0,
            anchor_rule: AnchorRule::ShortestThenMaxQ,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pairs_per_problem == 0 {
            return Err("pairs_per_problem must be >= 1".into());
        }
        if let Some(f) = self.hard_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("hard_fraction {f} outside [0,1]"));
            }
        }
        Ok(())
    }
}

/// Anchor preference. The default follows the shortest-correct rule; the
/// alternative prefers the most-visited correct trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorRule {
    ShortestThenMaxQ,
    MostVisited,
}

#[derive(Debug, Error, PartialEq)]
pub enum PairingError {
    #[error("no correct trajectory to anchor on")]
    NoPositive,
    #[error("no incorrect trajectory to sample")]
    NoNegative,
    #[error("no correct trajectory longer than the anchor")]
    NoSoftNegative,
    #[error("no pairs could be formed")]
    NoPairs,
}

/// Partition trajectories by reward, preserving order.
pub fn stratify(trajectories: &[Trajectory]) -> (Vec<&Trajectory>, Vec<&Trajectory>) {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for t in trajectories {
        if t.reward == 1 {
            correct.push(t);
        } else {
            incorrect.push(t);
        }
    }
    (correct, incorrect)
}

/// Shortest correct trajectory; ties by greatest max node Q, then lowest id.
pub fn select_positive_anchor<'a>(
    correct: &[&'a Trajectory],
) -> Result<&'a Trajectory, PairingError> {
    select_anchor(correct, AnchorRule::ShortestThenMaxQ)
}

pub fn select_anchor<'a>(
    correct: &[&'a Trajectory],
    rule: AnchorRule,
) -> Result<&'a Trajectory, PairingError> {
    let mut best: Option<&Trajectory> = None;
    for &t in correct {
        let better = match best {
            None => true,
            Some(b) => match rule {
                AnchorRule::ShortestThenMaxQ => {
                    t.length < b.length
                        || (t.length == b.length && t.max_node_q > b.max_node_q)
                        || (t.length == b.length && t.max_node_q == b.max_node_q && t.id < b.id)
                }
                AnchorRule::MostVisited => {
                    t.accumulated_visits > b.accumulated_visits
                        || (t.accumulated_visits == b.accumulated_visits && t.length < b.length)
                        || (t.accumulated_visits == b.accumulated_visits
                            && t.length == b.length
                            && t.id < b.id)
                }
            },
        };
        if better {
            best = Some(t);
        }
    }
    best.ok_or(PairingError::NoPositive)
}

/// Categorical draw weighted by accumulated visit count; uniform when every
/// weight is zero.
pub fn sample_hard_negative<'a>(
    incorrect: &[&'a Trajectory],
    rng: &mut ChaCha8Rng,
) -> Result<&'a Trajectory, PairingError> {
    if incorrect.is_empty() {
        return Err(PairingError::NoNegative);
    }
    let total: u64 = incorrect.iter().map(|t| t.accumulated_visits).sum();
    if total == 0 {
        let idx = rng.random_range(0..incorrect.len());
        return Ok(incorrect[idx]);
    }
    let mut x = rng.random_range(0..total);
    for t in incorrect {
        if x < t.accumulated_visits {
            return Ok(t);
        }
        x -= t.accumulated_visits;
    }
    Ok(incorrect[incorrect.len() - 1])
}

/// Uniform draw among correct trajectories strictly longer than the anchor.
pub fn sample_soft_negative<'a>(
    correct: &[&'a Trajectory],
    anchor: &Trajectory,
    rng: &mut ChaCha8Rng,
) -> Result<&'a Trajectory, PairingError> {
    let qualifying: Vec<&Trajectory> = correct
        .iter()
        .copied()
        .filter(|t| t.length > anchor.length)
        .collect();
    if qualifying.is_empty() {
        return Err(PairingError::NoSoftNegative);
    }
    let idx = rng.random_range(0..qualifying.len());
    Ok(qualifying[idx])
}

#[derive(Debug, Clone)]
pub struct PairingOutcome {
    pub pairs: Vec<ContrastPair>,
    /// Set when a pool smaller than the requested count forced repeats.
    pub repeated_negatives: bool,
}

/// Weighted draw over pool indices by accumulated visits (uniform fallback).
fn draw_index(pool: &[&Trajectory], rng: &mut ChaCha8Rng, weighted: bool) -> usize {
    if !weighted {
        return rng.random_range(0..pool.len());
    }
    let total: u64 = pool.iter().map(|t| t.accumulated_visits).sum();
    if total == 0 {
        return rng.random_range(0..pool.len());
    }
    let mut x = rng.random_range(0..total);
    for (i, t) in pool.iter().enumerate() {
        if x < t.accumulated_visits {
            return i;
        }
        x -= t.accumulated_visits;
    }
    pool.len() - 1
}

/// A negative pool that samples without replacement and refills (flagging
/// the repeat) once exhausted, so duplicates appear only when the pool is
/// smaller than the requested draw count.
struct NegativePool<'a> {
    full: Vec<&'a Trajectory>,
    working: Vec<&'a Trajectory>,
    weighted: bool,
    repeated: bool,
}

impl<'a> NegativePool<'a> {
    fn new(full: Vec<&'a Trajectory>, weighted: bool) -> Self {
        NegativePool {
            working: full.clone(),
            full,
            weighted,
            repeated: false,
        }
    }
    fn is_empty(&self) -> bool {
        self.full.is_empty()
    }
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> &'a Trajectory {
        if self.working.is_empty() {
            self.working = self.full.clone();
            self.repeated = true;
        }
        let idx = draw_index(&self.working, rng, self.weighted);
        self.working.swap_remove(idx)
    }
}

/// Build up to K pairs for one problem's trajectories.
pub fn build_pairs(
    trajectories: &[Trajectory],
    cfg: &PairingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairingOutcome, PairingError> {
    let (correct, incorrect) = stratify(trajectories);
    let anchor = select_anchor(&correct, cfg.anchor_rule).map_err(|_| PairingError::NoPairs)?;
    let soft_candidates: Vec<&Trajectory> = correct
        .iter()
        .copied()
        .filter(|t| t.length > anchor.length)
        .collect();
    let mut hard_pool = NegativePool::new(incorrect, true);
    let mut soft_pool = NegativePool::new(soft_candidates, false);
    if hard_pool.is_empty() && soft_pool.is_empty() {
        return Err(PairingError::NoPairs);
    }

    let k = cfg.pairs_per_problem;
    let hard_target = match cfg.hard_fraction {
        Some(f) => ((k as f64) * f).round() as usize,
        None => {
            if hard_pool.is_empty() {
                0
            } else {
                k
            }
        }
    };

    let mut pairs = Vec::with_capacity(k);
    for i in 0..k {
        let want_hard = i < hard_target;
        let (negative, kind) = if want_hard && !hard_pool.is_empty() {
            (hard_pool.draw(rng), NegativeKind::Hard)
        } else if !soft_pool.is_empty() {
            (soft_pool.draw(rng), NegativeKind::Soft)
        } else if !hard_pool.is_empty() {
            (hard_pool.draw(rng), NegativeKind::Hard)
        } else {
            break;
        };
        let kind_tag = match kind {
            NegativeKind::Hard => "hard",
            NegativeKind::Soft => "soft",
        };
        let id = content_id(format!(
            "pair:{}:{}:{}:{}:{}",
            anchor.problem_id, anchor.id, negative.id, kind_tag, i
        ));
        pairs.push(ContrastPair {
            id,
            problem_id: anchor.problem_id.clone(),
            positive: anchor.clone(),
            negative: negative.clone(),
            negative_kind: kind,
        });
    }
    if pairs.is_empty() {
        return Err(PairingError::NoPairs);
    }
    Ok(PairingOutcome {
        pairs,
        repeated_negatives: hard_pool.repeated || soft_pool.repeated,
    })
}
