//! Semantic-stability evaluation: strict consistency over original/perturbed
//! problem pairs, plus plain accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatMessage, ChatRequest, RequestTag};
use crate::record::{EvalRecord, EvalVariant, Problem};
use crate::search::AnswerVerifier;
use crate::template::{render, TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("problem {0} is missing its {1:?} record")]
    UnpairedRecord(String, EvalVariant),
    #[error("problem {0} has duplicate {1:?} records")]
    DuplicateRecord(String, EvalVariant),
    #[error("no records to aggregate")]
    EmptySet,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Strict consistency S: the fraction of problems answered correctly on both
/// the original and the perturbed variant.
pub fn strict_consistency(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut by_problem: BTreeMap<&str, (Option<u8>, Option<u8>)> = BTreeMap::new();
    for r in records {
        let slot = by_problem.entry(r.problem_id.as_str()).or_default();
        let cell = match r.variant {
            EvalVariant::Original => &mut slot.0,
            EvalVariant::Perturbed => &mut slot.1,
        };
        if cell.is_some() {
            return Err(EvalError::DuplicateRecord(r.problem_id.clone(), r.variant));
        }
        *cell = Some(r.correct);
    }
    let mut both = 0usize;
    for (pid, (orig, pert)) in &by_problem {
        let orig = orig.ok_or_else(|| {
            EvalError::UnpairedRecord(pid.to_string(), EvalVariant::Original)
        })?;
        let pert = pert.ok_or_else(|| {
            EvalError::UnpairedRecord(pid.to_string(), EvalVariant::Perturbed)
        })?;
        if orig == 1 && pert == 1 {
            both += 1;
        }
    }
    Ok(both as f64 / by_problem.len() as f64)
}

/// Mean correctness over the given records.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let sum: u64 = records.iter().map(|r| r.correct as u64).sum();
    Ok(sum as f64 / records.len() as f64)
}

/// Build the perturbation request for one problem; the response is treated
/// as the perturbed variant with the same gold answer.
pub fn build_perturbation_request(
    problem: &Problem,
    templates: &TemplateSet,
    model: &str,
    max_output_tokens: u32,
) -> Result<ChatRequest, EvalError> {
    let user = render(
        &templates.perturb_user,
        &[("PROBLEM", problem.statement.as_str())],
    )?;
    Ok(ChatRequest {
        messages: vec![ChatMessage::user(user)],
        temperature: 0.0,
        max_output_tokens,
        model_name: model.to_string(),
        request_tag: RequestTag::Evaluate,
    })
}

/// Build the greedy-decoding solve request for a problem statement.
pub fn build_solve_request(
    statement: &str,
    templates: &TemplateSet,
    model: &str,
    max_output_tokens: u32,
) -> Result<ChatRequest, EvalError> {
    let user = render(&templates.solve_user, &[("PROBLEM", statement)])?;
    Ok(ChatRequest {
        messages: vec![
            ChatMessage::system(templates.solve_system.clone()),
            ChatMessage::user(user),
        ],
        temperature: 0.0,
        max_output_tokens,
        model_name: model.to_string(),
        request_tag: RequestTag::Evaluate,
    })
}

/// Score a model response against the problem's gold answer.
pub fn score_response(model_text: &str, problem: &Problem, verifier: &dyn AnswerVerifier) -> u8 {
    u8::from(verifier.is_correct(model_text, problem))
}

/// Aggregates written to report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy_orig: f64,
    pub accuracy_pert: f64,
    pub strict_consistency: f64,
}

pub fn build_report(records: &[EvalRecord]) -> Result<EvalReport, EvalError> {
    let orig: Vec<EvalRecord> = records
        .iter()
        .filter(|r| r.variant == EvalVariant::Original)
        .cloned()
        .collect();
    let pert: Vec<EvalRecord> = records
        .iter()
        .filter(|r| r.variant == EvalVariant::Perturbed)
        .cloned()
        .collect();
    Ok(EvalReport {
        n: orig.len(),
        accuracy_orig: accuracy(&orig)?,
        accuracy_pert: accuracy(&pert)?,
        strict_consistency: strict_consistency(records)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::DomainTag;
    use crate::search::MathVerifier;

    fn rec(pid: &str, variant: EvalVariant, correct: u8) -> EvalRecord {
        EvalRecord {
            problem_id: pid.into(),
            variant,
            model_answer: "x".into(),
            correct,
        }
    }

    fn pairs(flags: &[(u8, u8)]) -> Vec<EvalRecord> {
        flags
            .iter()
            .enumerate()
            .flat_map(|(i, &(o, p))| {
                vec![
                    rec(&format!("p{i:03}"), EvalVariant::Original, o),
                    rec(&format!("p{i:03}"), EvalVariant::Perturbed, p),
                ]
            })
            .collect()
    }

    #[test]
    fn canonical_four_pair_fixture() {
        let records = pairs(&[(1, 1), (1, 0), (0, 1), (0, 0)]);
        assert!((strict_consistency(&records).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn all_consistent() {
        let records = pairs(&[(1, 1), (1, 1)]);
        assert!((strict_consistency(&records).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unpaired_record_is_error() {
        let mut records = pairs(&[(1, 1)]);
        records.push(rec("lonely", EvalVariant::Original, 1));
        assert!(matches!(
            strict_consistency(&records),
            Err(EvalError::UnpairedRecord(_, EvalVariant::Perturbed))
        ));
    }

    #[test]
    fn duplicate_variant_is_error() {
        let mut records = pairs(&[(1, 1)]);
        records.push(rec("p000", EvalVariant::Original, 0));
        assert!(matches!(
            strict_consistency(&records),
            Err(EvalError::DuplicateRecord(_, _))
        ));
    }

    #[test]
    fn order_does_not_matter() {
        let mut records = pairs(&[(1, 1), (1, 0), (0, 0), (1, 1)]);
        let s1 = strict_consistency(&records).unwrap();
        records.reverse();
        let s2 = strict_consistency(&records).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn accuracy_examples() {
        let records = vec![
            rec("a", EvalVariant::Original, 1),
            rec("b", EvalVariant::Original, 0),
            rec("c", EvalVariant::Original, 1),
            rec("d", EvalVariant::Original, 1),
        ];
        assert!((accuracy(&records).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(accuracy(&[]), Err(EvalError::EmptySet)));
        let zeros = vec![rec("a", EvalVariant::Original, 0)];
        assert_eq!(accuracy(&zeros).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_request_has_distractor_rule() {
        let templates = TemplateSet::builtin();
        let p = Problem {
            id: "p".into(),
            statement: "A train leaves at noon.".into(),
            gold_answer: "3".into(),
            domain_tag: DomainTag::Math,
        };
        let req = build_perturbation_request(&p, &templates, "m", 512).unwrap();
        let user = &req.messages[0].content;
        assert!(user.contains("distractor"));
        assert!(user.contains("A train leaves at noon."));
        assert_eq!(req.temperature, 0.0);
    }

    #[test]
    fn score_response_examples() {
        let p = Problem {
            id: "p".into(),
            statement: "Half?".into(),
            gold_answer: "0.5".into(),
            domain_tag: DomainTag::Math,
        };
        assert_eq!(score_response("Final Answer: \\boxed{1/2}", &p, &MathVerifier), 1);
        assert_eq!(score_response("nothing to extract", &p, &MathVerifier), 0);
        assert_eq!(score_response("Final Answer: \\boxed{2}", &p, &MathVerifier), 0);
    }
}
