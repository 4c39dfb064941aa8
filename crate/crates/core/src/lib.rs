//! Contrastive reasoning path synthesis.
//!
//! This crate turns tree-search exploration of step-segmented reasoning
//! traces into verified training data: UCT search over explorer-proposed
//! steps, stratification and contrastive pair sampling from the search
//! distribution, analyst critique and path synthesis through a pluggable
//! chat-model client, a verification filter on final answers, and a
//! strict-consistency evaluation harness. Everything runs offline against a
//! deterministic scripted mock backend.

pub mod answer;
pub mod client;
pub mod critique;
pub mod eval;
pub mod pairing;
pub mod pipeline;
pub mod record;
pub mod search;
pub mod segment;
pub mod synthesis;
pub mod template;
pub mod toy;

pub use client::{ChatMessage, ChatRequest, MockScript, ModelClient, RequestTag};
pub use pipeline::{BackendKind, PipelineError, RunConfig};
pub use record::{ContrastPair, Critique, DatasetRecord, Problem, Step, Trajectory};
pub use search::{SearchConfig, MathVerifier};
pub use segment::SegmentationConfig;
