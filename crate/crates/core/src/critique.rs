//! Analyst critique requests and tolerant parsing of the returned JSON.
//!
//! Model output is free text around (at best) one JSON object. Processing is
//! a fixed chain: extract the first balanced object span, apply an ordered
//! list of repairs (trailing commas, missing closers, interior quotes,
//! single-quoted keys), parse against the critique schema, then validate the
//! divergence index against the pair. Text that already parses is returned
//! untouched, so repair is a fixpoint on valid JSON.

use serde_json::Value;
use thiserror::Error;

use crate::client::{ChatMessage, ChatRequest, RequestTag};
use crate::record::{ContrastPair, Critique, LocalStepCritique, Problem, SynthesizedGuidance};
use crate::segment::semantic_prefix_match;
use crate::template::{render, TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum CritiqueError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("JSON unrepairable after rule application")]
    Unrepairable,
    #[error("critique schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("divergence_step_index {index} outside [0, {bound})")]
    IndexOutOfRange { index: i64, bound: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Build the Phase-1 analyst request for one contrast pair.
pub fn build_critique_request(
    problem: &Problem,
    pair: &ContrastPair,
    templates: &TemplateSet,
    model: &str,
    temperature: f64,
    max_output_tokens: u32,
) -> Result<ChatRequest, CritiqueError> {
    let user = render(
        &templates.critique_user,
        &[
            ("PROBLEM", problem.statement.as_str()),
            ("TRAJECTORY_A", pair.positive.text().as_str()),
            ("TRAJECTORY_B", pair.negative.text().as_str()),
        ],
    )?;
    Ok(ChatRequest {
        messages: vec![
            ChatMessage::system(templates.critique_system.clone()),
            ChatMessage::user(user),
        ],
        temperature,
        max_output_tokens,
        model_name: model.to_string(),
        request_tag: RequestTag::Critique,
    })
}

/// When a double quote appears inside a string, it closes the string only if
/// the next significant character is a JSON terminator.
fn closes_string(b: &[u8], quote_pos: usize) -> bool {
    let mut j = quote_pos + 1;
    while j < b.len() && (b[j] == b' ' || b[j] == b'\t' || b[j] == b'\n' || b[j] == b'\r') {
        j += 1;
    }
    if j >= b.len() {
        return true;
    }
    matches!(b[j], b',' | b'}' | b']' | b':')
}

fn strip_fences(raw: &str) -> &str {
    if !raw.contains("```") {
        return raw;
    }
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                let inner = &body[..close];
                if inner.contains('{') {
                    return inner;
                }
                rest = &body[close + 3..];
            }
            None => {
                if body.contains('{') {
                    return body;
                }
                return raw;
            }
        }
    }
    raw
}

/// Return the first balanced top-level `{...}` span, discarding surrounding
/// prose and code fences. When the object never closes (truncated output),
/// the remainder from the first brace is returned so the repair rules can
/// complete it.
pub fn extract_json_block(raw: &str) -> Result<String, CritiqueError> {
    let candidate = strip_fences(raw);
    let start = candidate.find('{').ok_or(CritiqueError::NoJsonFound)?;
    let tail = &candidate[start..];
    let b = tail.as_bytes();
    let mut depth = 0i64;
    let mut in_str = false;
    let mut escaped = false;
    for i in 0..b.len() {
        let c = b[i];
        if in_str {
            if escaped {
                escaped = false;
                continue;
            }
            match c {
                b'\\' => escaped = true,
                b'"' if closes_string(b, i) => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(tail[..=i].to_string());
                }
            }
            _ => {}
        }
    }
    // Truncated object: drop trailing lines that carry no JSON structure
    // (closing prose), then let the repair rules complete what remains.
    let mut end = tail.len();
    for line in tail.lines().rev() {
        if line.chars().any(|c| "{}[]:\",".contains(c)) {
            break;
        }
        end = tail[..end].trim_end().len().saturating_sub(line.trim_end().len());
    }
    let cut = tail[..end].trim_end().trim_end_matches('`').trim_end();
    Ok(cut.to_string())
}

/// Rule 1: drop commas whose next significant character is a closer (or end
/// of input, anticipating closer completion).
fn remove_trailing_commas(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut in_str = false;
    let mut escaped = false;
    for i in 0..b.len() {
        let c = b[i];
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == b'"' && closes_string(b, i) {
                in_str = false;
            }
            continue;
        }
        if c == b'"' {
            in_str = true;
            out.push(c);
            continue;
        }
        if c == b',' {
            let mut j = i + 1;
            while j < b.len() && b[j].is_ascii_whitespace() {
                j += 1;
            }
            if j >= b.len() || b[j] == b'}' || b[j] == b']' {
                continue;
            }
        }
        out.push(c);
    }
    String::from_utf8(out).expect("byte edits preserve utf8")
}

/// Rule 2: close an unterminated string and append missing closers by
/// balance count.
fn complete_closers(s: &str) -> String {
    let b = s.as_bytes();
    let mut out: Vec<u8> = Vec::with_capacity(b.len() + 8);
    let mut stack: Vec<u8> = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for i in 0..b.len() {
        let c = b[i];
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == b'"' && closes_string(b, i) {
                in_str = false;
            }
            continue;
        }
        match c {
            b'"' => in_str = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                stack.pop();
            }
            _ => {}
        }
        out.push(c);
    }
    if in_str {
        if escaped {
            // A truncated escape would swallow the closing quote.
            out.pop();
        }
        out.push(b'"');
    }
    while let Some(closer) = stack.pop() {
        out.push(closer);
    }
    String::from_utf8(out).expect("byte edits preserve utf8")
}

/// Rule 3: escape double quotes that sit inside a string value.
fn escape_interior_quotes(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut in_str = false;
    let mut escaped = false;
    for i in 0..b.len() {
        let c = b[i];
        if in_str {
            if escaped {
                escaped = false;
                out.push(c);
                continue;
            }
            if c == b'\\' {
                escaped = true;
                out.push(c);
                continue;
            }
            if c == b'"' {
                if closes_string(b, i) {
                    in_str = false;
                    out.push(c);
                } else {
                    out.push(b'\\');
                    out.push(b'"');
                }
                continue;
            }
            out.push(c);
            continue;
        }
        if c == b'"' {
            in_str = true;
        }
        out.push(c);
    }
    String::from_utf8(out).expect("byte edits preserve utf8")
}

/// Rule 4: rewrite single-quoted keys to double quotes.
fn normalize_single_quote_keys(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut in_str = false;
    let mut escaped = false;
    let mut last_sig: u8 = 0;
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == b'"' && closes_string(b, i) {
                in_str = false;
                last_sig = c;
            }
            i += 1;
            continue;
        }
        if c == b'"' {
            in_str = true;
            out.push(c);
            i += 1;
            continue;
        }
        if c == b'\'' && (last_sig == b'{' || last_sig == b',' || last_sig == 0) {
            // Key position: find the closing quote whose next significant
            // character is a colon.
            let mut j = i + 1;
            let mut close = None;
            while j < b.len() {
                if b[j] == b'\'' {
                    let mut k = j + 1;
                    while k < b.len() && b[k].is_ascii_whitespace() {
                        k += 1;
                    }
                    if k < b.len() && b[k] == b':' {
                        close = Some(j);
                        break;
                    }
                }
                j += 1;
            }
            if let Some(close) = close {
                out.push(b'"');
                for &inner in &b[i + 1..close] {
                    if inner == b'"' {
                        out.push(b'\\');
                    }
                    out.push(inner);
                }
                out.push(b'"');
                last_sig = b'"';
                i = close + 1;
                continue;
            }
        }
        if !c.is_ascii_whitespace() {
            last_sig = c;
        }
        out.push(c);
        i += 1;
    }
    String::from_utf8(out).expect("byte edits preserve utf8")
}

fn parses(s: &str) -> bool {
    serde_json::from_str::<Value>(s).is_ok()
}

/// Apply the ordered repair rules. Already-valid JSON is returned verbatim.
pub fn repair_json(candidate: &str) -> Result<String, CritiqueError> {
    if parses(candidate) {
        return Ok(candidate.to_string());
    }
    let repaired = normalize_single_quote_keys(&escape_interior_quotes(&complete_closers(
        &remove_trailing_commas(candidate),
    )));
    if parses(&repaired) {
        Ok(repaired)
    } else {
        Err(CritiqueError::Unrepairable)
    }
}

fn require_str(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String, CritiqueError> {
    let v = obj
        .get(key)
        .ok_or_else(|| CritiqueError::SchemaMismatch(format!("missing field {key}")))?;
    let s = v
        .as_str()
        .ok_or_else(|| CritiqueError::SchemaMismatch(format!("field {key} is not a string")))?;
    if s.is_empty() {
        return Err(CritiqueError::SchemaMismatch(format!("field {key} empty")));
    }
    Ok(s.to_string())
}

fn require_obj<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
) -> Result<&'a serde_json::Map<String, Value>, CritiqueError> {
    obj.get(key)
        .and_then(Value::as_object)
        .ok_or_else(|| CritiqueError::SchemaMismatch(format!("missing object {key}")))
}

fn coerce_index(v: Option<&Value>) -> Result<i64, CritiqueError> {
    let v = v.ok_or_else(|| {
        CritiqueError::SchemaMismatch("missing field divergence_step_index".into())
    })?;
    match v {
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                return Ok(i);
            }
            if let Some(f) = n.as_f64() {
                if f.fract() == 0.0 {
                    return Ok(f as i64);
                }
            }
            Err(CritiqueError::SchemaMismatch(
                "divergence_step_index not an integer".into(),
            ))
        }
        Value::String(s) => s.trim().parse::<i64>().map_err(|_| {
            CritiqueError::SchemaMismatch("divergence_step_index string not numeric".into())
        }),
        _ => Err(CritiqueError::SchemaMismatch(
            "divergence_step_index has wrong type".into(),
        )),
    }
}

/// Parse repaired JSON against the critique schema. Extra keys are ignored;
/// a numeric-string index is coerced.
pub fn parse_critique(json_text: &str) -> Result<Critique, CritiqueError> {
    let v: Value = serde_json::from_str(json_text)
        .map_err(|e| CritiqueError::SchemaMismatch(format!("not valid JSON: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| CritiqueError::SchemaMismatch("top level is not an object".into()))?;
    let divergence_step_index = coerce_index(obj.get("divergence_step_index"))?;
    let local = require_obj(obj, "local_step_critique")?;
    let guidance = require_obj(obj, "synthesized_guidance")?;
    Ok(Critique {
        divergence_step_index,
        local_step_critique: LocalStepCritique {
            trajectory_a_logic: require_str(local, "trajectory_a_logic")?,
            trajectory_b_logic: require_str(local, "trajectory_b_logic")?,
            critique_of_difference: require_str(local, "critique_of_difference")?,
        },
        global_strategic_analysis: require_str(obj, "global_strategic_analysis")?,
        synthesized_guidance: SynthesizedGuidance {
            success_pattern: require_str(guidance, "success_pattern")?,
            failure_mode_to_avoid: require_str(guidance, "failure_mode_to_avoid")?,
        },
    })
}

/// A critique that passed validation against its pair, with soft warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedCritique {
    pub critique: Critique,
    pub warnings: Vec<String>,
}

/// Hard check: the divergence index must address some step of either
/// trajectory. Soft check: an index inside the pair's identical prefix is
/// suspicious but allowed.
pub fn validate_critique(
    critique: Critique,
    pair: &ContrastPair,
) -> Result<ValidatedCritique, CritiqueError> {
    let bound = pair.positive.length.max(pair.negative.length);
    let idx = critique.divergence_step_index;
    if idx < 0 || (idx as usize) >= bound {
        return Err(CritiqueError::IndexOutOfRange { index: idx, bound });
    }
    let mut warnings = Vec::new();
    let prefix = semantic_prefix_match(&pair.positive.steps, &pair.negative.steps);
    if (idx as usize) < prefix {
        warnings.push(format!(
            "divergence index {idx} lies inside the identical prefix of length {prefix}"
        ));
    }
    Ok(ValidatedCritique { critique, warnings })
}

/// Full chain from raw analyst output to a validated critique.
pub fn process_critique_response(
    raw: &str,
    pair: &ContrastPair,
) -> Result<ValidatedCritique, CritiqueError> {
    let block = extract_json_block(raw)?;
    let repaired = repair_json(&block)?;
    let critique = parse_critique(&repaired)?;
    validate_critique(critique, pair)
}
