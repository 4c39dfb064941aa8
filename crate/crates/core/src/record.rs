//! Domain types shared across pipeline stages and the JSONL record schemas
//! they serialize to.
//!
//! Every stage file is line-delimited JSON, one record per line. Records are
//! immutable values; identifiers are content-addressed so reruns of a stage
//! produce identical files.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Node identifier within a single problem's search tree.
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum RecordError {
    /// The line is not syntactically valid JSON (corrupt or truncated).
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    /// The line is valid JSON but violates the target type's invariants.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

/// Per-type invariant checks, run after deserialization.
pub trait Validate {
    fn validate(&self) -> Result<(), String>;
}

/// Serialize a record to a single JSONL line (no trailing newline).
pub fn serialize_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("record types serialize infallibly")
}

/// Parse one JSONL line into a validated domain value.
///
/// Syntactically broken lines yield `MalformedRecord`; lines that are valid
/// JSON but fail the type's schema or invariants yield `InvariantViolation`.
pub fn parse_line<T: DeserializeOwned + Validate>(line: &str) -> Result<T, RecordError> {
    match serde_json::from_str::<T>(line) {
        Ok(value) => {
            value.validate().map_err(RecordError::InvariantViolation)?;
            Ok(value)
        }
        Err(type_err) => match serde_json::from_str::<serde_json::Value>(line) {
            Ok(_) => Err(RecordError::InvariantViolation(type_err.to_string())),
            Err(syntax_err) => Err(RecordError::MalformedRecord(syntax_err.to_string())),
        },
    }
}

/// Content-addressed identifier: truncated hex SHA-256 of the input bytes.
pub fn content_id(bytes: impl AsRef<[u8]>) -> String {
    let digest = Sha256::digest(bytes.as_ref());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Math,
}

/// A seed problem: statement plus canonical gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub gold_answer: String,
    pub domain_tag: DomainTag,
}

impl Validate for Problem {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("problem id empty".into());
        }
        if self.gold_answer.is_empty() {
            return Err("gold_answer empty".into());
        }
        Ok(())
    }
}

/// What produced the boundary at which a step ends (the final step of a
/// segmentation inherits the kind of the boundary that started it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Structural,
    Connector,
    Enumeration,
    LengthCap,
}

/// One segmented reasoning step. Delimiters are preserved in `text`, so
/// concatenating a trajectory's step texts reproduces the source exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub text: String,
    pub index: usize,
    pub boundary_kind: BoundaryKind,
}

impl Validate for Step {
    fn validate(&self) -> Result<(), String> {
        if self.text.is_empty() {
            return Err("step text empty".into());
        }
        Ok(())
    }
}

/// A complete root-to-terminal reasoning path with its search statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub problem_id: String,
    pub steps: Vec<Step>,
    /// Binary terminal reward: 1 iff the extracted final answer matched gold.
    pub reward: u8,
    /// Node ids from root to leaf, root included.
    pub node_path: Vec<NodeId>,
    /// Sum of visit counts over the path, root excluded.
    pub accumulated_visits: u64,
    /// Maximum mean value over the non-root path nodes.
    pub max_node_q: f64,
    pub length: usize,
}

impl Trajectory {
    /// The trajectory's raw text: concatenation of its step texts.
    pub fn text(&self) -> String {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

impl Validate for Trajectory {
    fn validate(&self) -> Result<(), String> {
        if self.reward > 1 {
            return Err(format!("reward {} not in {{0,1}}", self.reward));
        }
        if self.steps.is_empty() {
            return Err("trajectory has no steps".into());
        }
        if self.length != self.steps.len() {
            return Err(format!(
                "length {} != step count {}",
                self.length,
                self.steps.len()
            ));
        }
        for (i, s) in self.steps.iter().enumerate() {
            s.validate()?;
            if s.index != i {
                return Err(format!("step index {} at position {i}", s.index));
            }
        }
        if !(0.0..=1.0).contains(&self.max_node_q) {
            return Err(format!("max_node_q {} outside [0,1]", self.max_node_q));
        }
        Ok(())
    }
}

/// One node of a search tree. `step` is `None` for the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub step: Option<Step>,
    /// Visit count N.
    pub visits: u64,
    /// Total backpropagated value W.
    pub value_sum: f64,
    pub children: Vec<NodeId>,
    pub depth: u32,
    pub terminal: bool,
    pub terminal_reward: Option<u8>,
}

impl TreeNode {
    /// Mean value Q = W/N, 0 when unvisited.
    pub fn q(&self) -> f64 {
        if self.visits > 0 {
            self.value_sum / self.visits as f64
        } else {
            0.0
        }
    }
}

impl Validate for TreeNode {
    fn validate(&self) -> Result<(), String> {
        if self.value_sum < 0.0 {
            return Err("value_sum negative".into());
        }
        if self.value_sum > self.visits as f64 {
            return Err("value_sum exceeds visits (Q would exceed 1)".into());
        }
        if let Some(r) = self.terminal_reward {
            if r > 1 {
                return Err(format!("terminal_reward {r} not in {{0,1}}"));
            }
            if !self.terminal {
                return Err("terminal_reward set on non-terminal node".into());
            }
        }
        if let Some(s) = &self.step {
            s.validate()?;
        } else if self.depth != 0 {
            return Err("non-root node missing step".into());
        }
        Ok(())
    }
}

/// Serialized form of one problem's finished search tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub problem_id: String,
    pub root: NodeId,
    pub nodes: Vec<TreeNode>,
    pub completed_rollouts: u32,
    pub aborted_rollouts: u32,
    pub flags: Vec<String>,
}

impl Validate for TreeRecord {
    fn validate(&self) -> Result<(), String> {
        if self.root >= self.nodes.len() {
            return Err("root id out of range".into());
        }
        for n in &self.nodes {
            n.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Hard,
    Soft,
}

/// A (positive, negative) trajectory pair feeding the critique stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub id: String,
    pub problem_id: String,
    pub positive: Trajectory,
    pub negative: Trajectory,
    pub negative_kind: NegativeKind,
}

impl Validate for ContrastPair {
    fn validate(&self) -> Result<(), String> {
        self.positive.validate()?;
        self.negative.validate()?;
        if self.positive.reward != 1 {
            return Err("positive trajectory must have reward 1".into());
        }
        match self.negative_kind {
            NegativeKind::Hard => {
                if self.negative.reward != 0 {
                    return Err("hard negative must have reward 0".into());
                }
            }
            NegativeKind::Soft => {
                if self.negative.reward != 1 {
                    return Err("soft negative must have reward 1".into());
                }
                if self.negative.length <= self.positive.length {
                    return Err("soft negative must be longer than the positive".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStepCritique {
    pub trajectory_a_logic: String,
    pub trajectory_b_logic: String,
    pub critique_of_difference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedGuidance {
    pub success_pattern: String,
    pub failure_mode_to_avoid: String,
}

/// The dual-granularity analysis record. Field names are the wire schema the
/// analyst is instructed to return; they must not be renamed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub divergence_step_index: i64,
    pub local_step_critique: LocalStepCritique,
    pub global_strategic_analysis: String,
    pub synthesized_guidance: SynthesizedGuidance,
}

impl Validate for Critique {
    fn validate(&self) -> Result<(), String> {
        if self.divergence_step_index < 0 {
            return Err("divergence_step_index negative".into());
        }
        let texts = [
            &self.local_step_critique.trajectory_a_logic,
            &self.local_step_critique.trajectory_b_logic,
            &self.local_step_critique.critique_of_difference,
            &self.global_strategic_analysis,
            &self.synthesized_guidance.success_pattern,
            &self.synthesized_guidance.failure_mode_to_avoid,
        ];
        if texts.iter().any(|t| t.is_empty()) {
            return Err("critique text field empty".into());
        }
        Ok(())
    }
}

/// Storage wrapper for a validated critique: provenance plus soft warnings.
/// The nested `critique` object carries exactly the analyst wire schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueRecord {
    pub id: String,
    pub problem_id: String,
    pub pair_id: String,
    pub critique: Critique,
    pub warnings: Vec<String>,
}

impl Validate for CritiqueRecord {
    fn validate(&self) -> Result<(), String> {
        self.critique.validate()
    }
}

/// A critique response that could not be turned into a record; raw text is
/// retained for offline inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCritique {
    pub pair_id: String,
    pub problem_id: String,
    pub raw: String,
    pub reason: String,
}

impl Validate for RejectedCritique {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// A synthesized reasoning path, segmented like any trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedPath {
    pub steps: Vec<Step>,
    pub raw_text: String,
    pub extracted_answer: Option<String>,
}

impl Validate for SynthesizedPath {
    fn validate(&self) -> Result<(), String> {
        let concat: String = self.steps.iter().map(|s| s.text.as_str()).collect();
        if concat != self.raw_text {
            return Err("steps do not reassemble raw_text".into());
        }
        Ok(())
    }
}

/// One synthesis candidate with its verification verdict (synth.jsonl).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub problem_id: String,
    pub pair_id: String,
    pub critique_id: String,
    pub path: SynthesizedPath,
    pub verified: bool,
}

impl Validate for SynthRecord {
    fn validate(&self) -> Result<(), String> {
        self.path.validate()
    }
}

/// The unit of the emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub problem_id: String,
    pub prompt: String,
    pub completion: String,
    pub verified: bool,
    pub source_pair_id: String,
    pub critique_id: String,
}

impl Validate for DatasetRecord {
    fn validate(&self) -> Result<(), String> {
        if self.prompt.is_empty() || self.completion.is_empty() {
            return Err("empty prompt or completion".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalVariant {
    Original,
    Perturbed,
}

/// One scored model response from the evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub problem_id: String,
    pub variant: EvalVariant,
    pub model_answer: String,
    pub correct: u8,
}

impl Validate for EvalRecord {
    fn validate(&self) -> Result<(), String> {
        if self.correct > 1 {
            return Err(format!("correct flag {} not in {{0,1}}", self.correct));
        }
        Ok(())
    }
}
