//! Phase-2 path synthesis: request construction, the verification filter,
//! and dataset assembly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::answer::extract_final_answer;
use crate::client::{ChatMessage, ChatRequest, RequestTag};
use crate::record::{DatasetRecord, Problem, SynthRecord, SynthesizedPath};
use crate::search::AnswerVerifier;
use crate::segment::{segment, SegmentationConfig};
use crate::template::{render, TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("verified pool is empty")]
    EmptyPool,
}

/// Build the Phase-2 synthesis request from a validated critique. The style
/// example defaults to the pair's positive trajectory; when empty, the slot
/// stays blank and a warning is returned.
pub fn build_synthesis_request(
    problem: &Problem,
    critique: &crate::record::Critique,
    style_example: &str,
    templates: &TemplateSet,
    model: &str,
    temperature: f64,
    max_output_tokens: u32,
) -> Result<(ChatRequest, Vec<String>), SynthesisError> {
    let mut warnings = Vec::new();
    if style_example.trim().is_empty() {
        warnings.push("style example missing; synthesis request built with empty slot".into());
    }
    let index_text = critique.divergence_step_index.to_string();
    let user = render(
        &templates.synthesis_user,
        &[
            ("PROBLEM", problem.statement.as_str()),
            (
                "SUCCESS_PATTERN",
                critique.synthesized_guidance.success_pattern.as_str(),
            ),
            (
                "FAILURE_MODE",
                critique.synthesized_guidance.failure_mode_to_avoid.as_str(),
            ),
            ("DIVERGENCE_STEP_INDEX", index_text.as_str()),
            (
                "CRITIQUE_OF_DIFFERENCE",
                critique.local_step_critique.critique_of_difference.as_str(),
            ),
            (
                "GLOBAL_STRATEGIC_ANALYSIS",
                critique.global_strategic_analysis.as_str(),
            ),
            ("STYLE_EXAMPLE", style_example),
        ],
    )?;
    let req = ChatRequest {
        messages: vec![
            ChatMessage::system(templates.synthesis_system.clone()),
            ChatMessage::user(user),
        ],
        temperature,
        max_output_tokens,
        model_name: model.to_string(),
        request_tag: RequestTag::Synthesize,
    };
    Ok((req, warnings))
}

/// Segment raw synthesis output into a path record.
pub fn path_from_raw(raw_text: &str, seg_cfg: &SegmentationConfig) -> SynthesizedPath {
    let seg = segment(raw_text, seg_cfg);
    SynthesizedPath {
        steps: seg.steps,
        raw_text: raw_text.to_string(),
        extracted_answer: extract_final_answer(raw_text).map(|a| a.raw),
    }
}

/// The verification filter: a synthesized path is retained only when its
/// extracted final answer is equivalent to gold.
pub fn verify(path: &SynthesizedPath, problem: &Problem, verifier: &dyn AnswerVerifier) -> bool {
    if path.raw_text.is_empty() {
        return false;
    }
    verifier.is_correct(&path.raw_text, problem)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyOutcome {
    pub records: Vec<DatasetRecord>,
    /// target_size minus what the pool could supply (0 when met).
    pub shortfall: usize,
}

/// Uniform sample without replacement from the verified pool.
///
/// `balance_per_problem` switches to round-robin draws across problems, for
/// corpora where per-problem balance matters more than global uniformity.
pub fn assemble_dataset(
    verified: &[(&SynthRecord, &Problem)],
    target_size: usize,
    balance_per_problem: bool,
    rng: &mut ChaCha8Rng,
) -> Result<AssemblyOutcome, SynthesisError> {
    if verified.is_empty() {
        return Err(SynthesisError::EmptyPool);
    }
    let take = target_size.min(verified.len());
    let shortfall = target_size.saturating_sub(verified.len());

    let selected: Vec<usize> = if balance_per_problem {
        let mut by_problem: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
        for (i, (rec, _)) in verified.iter().enumerate() {
            by_problem.entry(rec.problem_id.as_str()).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_problem.into_values().collect();
        for g in groups.iter_mut() {
            shuffle(g, rng);
        }
        let mut picked = Vec::with_capacity(take);
        let mut round = 0usize;
        while picked.len() < take {
            let mut any = false;
            for g in groups.iter() {
                if let Some(&idx) = g.get(round) {
                    picked.push(idx);
                    any = true;
                    if picked.len() == take {
                        break;
                    }
                }
            }
            if !any {
                break;
            }
            round += 1;
        }
        picked
    } else {
        let mut indices: Vec<usize> = (0..verified.len()).collect();
        shuffle(&mut indices, rng);
        indices.truncate(take);
        indices
    };

    let mut records: Vec<DatasetRecord> = selected
        .into_iter()
        .map(|i| {
            let (rec, problem) = verified[i];
            DatasetRecord {
                problem_id: rec.problem_id.clone(),
                prompt: problem.statement.clone(),
                completion: rec.path.raw_text.clone(),
                verified: rec.verified,
                source_pair_id: rec.pair_id.clone(),
                critique_id: rec.critique_id.clone(),
            }
        })
        .collect();
    records.sort_by(|a, b| {
        (&a.problem_id, &a.source_pair_id, &a.critique_id).cmp(&(
            &b.problem_id,
            &b.source_pair_id,
            &b.critique_id,
        ))
    });
    Ok(AssemblyOutcome { records, shortfall })
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}
