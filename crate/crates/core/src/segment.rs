//! Hierarchical step segmentation.
//!
//! A reasoning trace is split into steps by three delimiter tiers, applied in
//! priority order: structural boundaries (newline runs and the LaTeX line
//! break), sentence-initial logic connectors, and explicit enumeration
//! markers. Splits never land inside a math span (`$...$`, `$$...$$`,
//! `\(...\)`, `\[...\]`), and any step longer than the token cap is
//! force-split at the last usable whitespace before the cap.
//!
//! Delimiters attach to the step they end, so concatenating the produced
//! step texts always reproduces the input byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::record::{BoundaryKind, Step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub max_step_tokens: usize,
    pub connector_list: Vec<String>,
    /// Digits inside a pattern match any digit run, so "1." also matches "23.".
    pub enumeration_patterns: Vec<String>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            max_step_tokens: 256,
            connector_list: ["Therefore,", "Thus,", "Hence,", "So,", "Consequently,"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            enumeration_patterns: ["1.", "2.", "Step 1:", "First,"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_step_tokens == 0 {
            return Err("max_step_tokens must be >= 1".into());
        }
        if self.connector_list.is_empty() {
            return Err("connector list must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentFlag {
    /// Math delimiters never closed; only structural splitting was applied.
    UnbalancedMathSpan,
    /// A step exceeds the token cap but holds no usable split point.
    OversizedStep(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub steps: Vec<Step>,
    pub flags: Vec<SegmentFlag>,
}

impl Segmentation {
    pub fn unbalanced_math(&self) -> bool {
        self.flags.contains(&SegmentFlag::UnbalancedMathSpan)
    }
}

/// Whitespace-word token count: deterministic and monotone under
/// concatenation.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Byte ranges of math spans, and whether every opened span closed.
fn math_spans(text: &str) -> (Vec<(usize, usize)>, bool) {
    let b = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'\\' && i + 1 < b.len() {
            match b[i + 1] {
                b'(' => match find_seq(b, i + 2, b"\\)") {
                    Some(end) => {
                        spans.push((i, end + 2));
                        i = end + 2;
                    }
                    None => return (spans, false),
                },
                b'[' => match find_seq(b, i + 2, b"\\]") {
                    Some(end) => {
                        spans.push((i, end + 2));
                        i = end + 2;
                    }
                    None => return (spans, false),
                },
                // Any other escape (including "\\" and "\$") is literal.
                _ => i += 2,
            }
            continue;
        }
        if b[i] == b'$' {
            if i + 1 < b.len() && b[i + 1] == b'$' {
                match find_seq(b, i + 2, b"$$") {
                    Some(end) => {
                        spans.push((i, end + 2));
                        i = end + 2;
                    }
                    None => return (spans, false),
                }
            } else {
                match find_unescaped_dollar(b, i + 1) {
                    Some(end) => {
                        spans.push((i, end + 1));
                        i = end + 1;
                    }
                    None => return (spans, false),
                }
            }
            continue;
        }
        i += 1;
    }
    (spans, true)
}

fn find_seq(b: &[u8], from: usize, needle: &[u8]) -> Option<usize> {
    let mut i = from;
    while i + needle.len() <= b.len() {
        if b[i] == b'\\' && needle[0] != b'\\' {
            i += 2;
            continue;
        }
        if &b[i..i + needle.len()] == needle {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn find_unescaped_dollar(b: &[u8], from: usize) -> Option<usize> {
    let mut i = from;
    while i < b.len() {
        if b[i] == b'\\' {
            i += 2;
            continue;
        }
        if b[i] == b'$' {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// True when the character starting at byte `pos` sits inside a span.
fn char_in_span(spans: &[(usize, usize)], pos: usize) -> bool {
    spans.iter().any(|&(s, e)| pos >= s && pos < e)
}

/// True when a split at byte `pos` would cut a span open.
fn split_in_span(spans: &[(usize, usize)], pos: usize) -> bool {
    spans.iter().any(|&(s, e)| pos > s && pos < e)
}

/// Split offsets after maximal runs of newlines and LaTeX line breaks.
fn structural_splits(text: &str, spans: &[(usize, usize)], protect: bool) -> Vec<usize> {
    let b = text.as_bytes();
    let mut splits = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let protected = protect && char_in_span(spans, i);
        let starts_run =
            b[i] == b'\n' || (b[i] == b'\\' && i + 1 < b.len() && b[i + 1] == b'\\');
        if starts_run && !protected {
            let mut j = i;
            loop {
                if j < b.len() && b[j] == b'\n' && !(protect && char_in_span(spans, j)) {
                    j += 1;
                } else if j + 1 < b.len()
                    && b[j] == b'\\'
                    && b[j + 1] == b'\\'
                    && !(protect && char_in_span(spans, j))
                {
                    j += 2;
                } else {
                    break;
                }
            }
            if j < b.len() {
                splits.push(j);
            }
            i = j.max(i + 1);
        } else {
            i += 1;
        }
    }
    splits
}

/// Sentence-initial test: at least one whitespace char walking back, then a
/// terminator from `punct`.
fn sentence_initial(text: &str, piece_start: usize, pos: usize, punct: &[char]) -> bool {
    if pos == piece_start {
        return true;
    }
    let mut saw_ws = false;
    for ch in text[piece_start..pos].chars().rev() {
        if ch.is_whitespace() {
            saw_ws = true;
            continue;
        }
        return saw_ws && punct.contains(&ch);
    }
    // Only whitespace between the piece start and the match.
    true
}

/// Match `pat` against `text[pos..]`, generalizing digit runs; returns the
/// matched byte length.
fn pattern_match_len(text: &str, pat: &str) -> Option<usize> {
    let tb = text.as_bytes();
    let pb = pat.as_bytes();
    let mut ti = 0;
    let mut pi = 0;
    while pi < pb.len() {
        if pb[pi].is_ascii_digit() {
            while pi < pb.len() && pb[pi].is_ascii_digit() {
                pi += 1;
            }
            let start = ti;
            while ti < tb.len() && tb[ti].is_ascii_digit() {
                ti += 1;
            }
            if ti == start {
                return None;
            }
        } else {
            if ti >= tb.len() || tb[ti] != pb[pi] {
                return None;
            }
            ti += 1;
            pi += 1;
        }
    }
    Some(ti)
}

fn tier_splits(
    text: &str,
    piece: (usize, usize),
    spans: &[(usize, usize)],
    patterns: &[String],
    punct: &[char],
    require_trailing_ws: bool,
) -> Vec<usize> {
    let (start, end) = piece;
    let mut splits = Vec::new();
    let segment = &text[start..end];
    for (off, _) in segment.char_indices() {
        let pos = start + off;
        if pos == start || split_in_span(spans, pos) {
            continue;
        }
        for pat in patterns {
            if let Some(len) = pattern_match_len(&text[pos..end], pat) {
                if require_trailing_ws {
                    match text[pos + len..].chars().next() {
                        Some(c) if !c.is_whitespace() => continue,
                        _ => {}
                    }
                }
                if sentence_initial(text, start, pos, punct) {
                    splits.push(pos);
                    break;
                }
            }
        }
    }
    splits
}

/// Force-splits for a piece exceeding the token cap. Returns split offsets
/// and whether an oversized step had to be kept whole.
fn cap_splits(
    text: &str,
    piece: (usize, usize),
    spans: &[(usize, usize)],
    protect: bool,
    max_tokens: usize,
) -> (Vec<usize>, bool) {
    let mut splits = Vec::new();
    let mut oversized = false;
    let mut start = piece.0;
    let end = piece.1;
    loop {
        let mut token_starts = Vec::new();
        let mut prev_ws = true;
        for (off, ch) in text[start..end].char_indices() {
            if ch.is_whitespace() {
                prev_ws = true;
            } else {
                if prev_ws {
                    token_starts.push(start + off);
                }
                prev_ws = false;
            }
        }
        if token_starts.len() <= max_tokens {
            break;
        }
        // Prefer the boundary right before token max_tokens+1; back off while
        // the cut would land inside a protected span.
        let mut k = max_tokens;
        let mut chosen = None;
        while k >= 1 {
            let cut = token_starts[k];
            if !(protect && split_in_span(spans, cut)) {
                chosen = Some(cut);
                break;
            }
            k -= 1;
        }
        match chosen {
            Some(cut) => {
                splits.push(cut);
                start = cut;
            }
            None => {
                oversized = true;
                break;
            }
        }
    }
    (splits, oversized)
}

fn pieces_from(splits: &[usize], start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut cur = start;
    for &s in splits {
        if s > cur && s < end {
            pieces.push((cur, s));
            cur = s;
        }
    }
    pieces.push((cur, end));
    pieces
}

/// Drop splits that would create a whitespace-only step; such whitespace
/// attaches to the following step instead.
fn drop_blank_pieces(text: &str, splits: Vec<(usize, BoundaryKind)>) -> Vec<(usize, BoundaryKind)> {
    let mut kept = Vec::with_capacity(splits.len());
    let mut prev = 0usize;
    for (s, kind) in splits {
        if s > prev && s < text.len() && text[prev..s].chars().any(|c| !c.is_whitespace()) {
            kept.push((s, kind));
            prev = s;
        }
    }
    // A whitespace-only tail merges into the preceding step.
    if let Some(&(last, _)) = kept.last() {
        if text[last..].chars().all(|c| c.is_whitespace()) {
            kept.pop();
        }
    }
    kept
}

/// Segment `text` into steps. Empty input yields no steps; whitespace-only
/// input yields a single step.
pub fn segment(text: &str, cfg: &SegmentationConfig) -> Segmentation {
    if text.is_empty() {
        return Segmentation {
            steps: Vec::new(),
            flags: Vec::new(),
        };
    }
    let (spans, balanced) = math_spans(text);
    let mut flags = Vec::new();
    if !balanced {
        flags.push(SegmentFlag::UnbalancedMathSpan);
    }

    let mut splits: Vec<(usize, BoundaryKind)> = structural_splits(text, &spans, balanced)
        .into_iter()
        .map(|s| (s, BoundaryKind::Structural))
        .collect();

    if balanced {
        let connector_punct = ['.', '!', '?'];
        let enum_punct = ['.', '!', '?', ':'];
        let offsets: Vec<usize> = splits.iter().map(|(s, _)| *s).collect();
        for piece in pieces_from(&offsets, 0, text.len()) {
            for s in tier_splits(text, piece, &spans, &cfg.connector_list, &connector_punct, false)
            {
                splits.push((s, BoundaryKind::Connector));
            }
        }
        splits.sort_by_key(|(s, _)| *s);
        let offsets: Vec<usize> = splits.iter().map(|(s, _)| *s).collect();
        for piece in pieces_from(&offsets, 0, text.len()) {
            for s in tier_splits(
                text,
                piece,
                &spans,
                &cfg.enumeration_patterns,
                &enum_punct,
                true,
            ) {
                splits.push((s, BoundaryKind::Enumeration));
            }
        }
        splits.sort_by_key(|(s, _)| *s);
    }

    let mut splits = drop_blank_pieces(text, splits);

    let offsets: Vec<usize> = splits.iter().map(|(s, _)| *s).collect();
    for piece in pieces_from(&offsets, 0, text.len()) {
        let (cuts, oversized) = cap_splits(text, piece, &spans, balanced, cfg.max_step_tokens);
        for c in cuts {
            splits.push((c, BoundaryKind::LengthCap));
        }
        if oversized {
            flags.push(SegmentFlag::OversizedStep(piece.0));
        }
    }
    splits.sort_by_key(|(s, _)| *s);
    splits.dedup_by_key(|(s, _)| *s);

    let mut steps = Vec::new();
    let mut cur = 0usize;
    let mut prev_kind = BoundaryKind::Structural;
    for &(s, kind) in &splits {
        if s <= cur || s >= text.len() {
            continue;
        }
        steps.push(Step {
            text: text[cur..s].to_string(),
            index: steps.len(),
            boundary_kind: kind,
        });
        cur = s;
        prev_kind = kind;
    }
    steps.push(Step {
        text: text[cur..].to_string(),
        index: steps.len(),
        boundary_kind: prev_kind,
    });
    Segmentation { steps, flags }
}

/// Normalize a step for alignment: collapse whitespace and lowercase outside
/// math spans, preserve math spans verbatim, and trim.
pub fn normalize_step_text(text: &str) -> String {
    let (spans, _) = math_spans(text);
    let mut out = String::with_capacity(text.len());
    let mut pending_ws = false;
    for (i, ch) in text.char_indices() {
        if char_in_span(&spans, i) {
            if pending_ws {
                out.push(' ');
                pending_ws = false;
            }
            out.push(ch);
        } else if ch.is_whitespace() {
            pending_ws = true;
        } else {
            if pending_ws {
                out.push(' ');
                pending_ws = false;
            }
            out.extend(ch.to_lowercase());
        }
    }
    out.trim().to_string()
}

/// Length of the longest identical prefix of the two step lists under
/// normalization.
pub fn semantic_prefix_match(a: &[Step], b: &[Step]) -> usize {
    let mut i = 0;
    while i < a.len() && i < b.len() {
        if normalize_step_text(&a[i].text) != normalize_step_text(&b[i].text) {
            break;
        }
        i += 1;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(seg: &Segmentation) -> Vec<&str> {
        seg.steps.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn structural_split_takes_priority() {
        let seg = segment(
            "Compute 2+3.\nTherefore, the answer is 5.",
            &SegmentationConfig::default(),
        );
        assert_eq!(
            texts(&seg),
            vec!["Compute 2+3.\n", "Therefore, the answer is 5."]
        );
        assert_eq!(seg.steps[0].boundary_kind, BoundaryKind::Structural);
    }

    #[test]
    fn newline_inside_math_span_is_protected() {
        let seg = segment("We have $a\nb$ inside math", &SegmentationConfig::default());
        assert_eq!(texts(&seg), vec!["We have $a\nb$ inside math"]);
    }

    #[test]
    fn whitespace_only_input_is_single_step() {
        let seg = segment(" ", &SegmentationConfig::default());
        assert_eq!(texts(&seg), vec![" "]);
    }

    #[test]
    fn connector_splits_at_sentence_start() {
        let seg = segment(
            "We know x. Therefore, x wins. So, done.",
            &SegmentationConfig::default(),
        );
        assert_eq!(
            texts(&seg),
            vec!["We know x. ", "Therefore, x wins. ", "So, done."]
        );
        assert_eq!(seg.steps[0].boundary_kind, BoundaryKind::Connector);
        assert_eq!(seg.steps[1].boundary_kind, BoundaryKind::Connector);
    }

    #[test]
    fn mid_clause_connector_not_split() {
        let seg = segment(
            "It follows that Thus, is not a boundary here",
            &SegmentationConfig::default(),
        );
        assert_eq!(seg.steps.len(), 1);
    }

    #[test]
    fn enumeration_split() {
        let seg = segment(
            "Plan: 1. mix the parts. 2. heat gently.",
            &SegmentationConfig::default(),
        );
        assert_eq!(
            texts(&seg),
            vec!["Plan: ", "1. mix the parts. ", "2. heat gently."]
        );
        assert_eq!(seg.steps[0].boundary_kind, BoundaryKind::Enumeration);
    }

    #[test]
    fn decimal_is_not_an_enumeration() {
        let seg = segment("The mass is 3. 14 kg total", &SegmentationConfig::default());
        // "14" lacks the trailing dot pattern; "3." is mid-sentence.
        assert_eq!(seg.steps.len(), 1);
    }

    #[test]
    fn token_count_examples() {
        assert_eq!(count_tokens("a b  c"), 3);
        assert_eq!(count_tokens(""), 0);
        let long = vec!["x"; 300].join(" ");
        assert_eq!(count_tokens(&long), 300);
    }

    #[test]
    fn length_cap_forces_split() {
        let cfg = SegmentationConfig::default();
        let long = vec!["x"; 300].join(" ");
        let seg = segment(&long, &cfg);
        assert_eq!(seg.steps.len(), 2);
        assert_eq!(count_tokens(&seg.steps[0].text), 256);
        assert_eq!(count_tokens(&seg.steps[1].text), 44);
        assert_eq!(seg.steps[0].boundary_kind, BoundaryKind::LengthCap);
        let joined: String = seg.steps.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(joined, long);
    }

    #[test]
    fn unbalanced_dollar_falls_back_to_structural() {
        let seg = segment("It costs $5 to start.\nSo, we pay.", &SegmentationConfig::default());
        assert!(seg.unbalanced_math());
        assert_eq!(texts(&seg), vec!["It costs $5 to start.\n", "So, we pay."]);
    }

    #[test]
    fn latex_line_break_is_structural() {
        let seg = segment("x = 1 \\\\ y = 2", &SegmentationConfig::default());
        assert_eq!(texts(&seg), vec!["x = 1 \\\\", " y = 2"]);
    }

    #[test]
    fn double_newline_is_one_boundary() {
        let seg = segment("A line.\n\nNext part.", &SegmentationConfig::default());
        assert_eq!(texts(&seg), vec!["A line.\n\n", "Next part."]);
    }

    #[test]
    fn leading_newline_attaches_forward() {
        let seg = segment("\nStart here.", &SegmentationConfig::default());
        assert_eq!(texts(&seg), vec!["\nStart here."]);
    }

    #[test]
    fn prefix_match_examples() {
        let mk = |t: &str, i: usize| Step {
            text: t.into(),
            index: i,
            boundary_kind: BoundaryKind::Structural,
        };
        let a = vec![mk("X", 0), mk("Y", 1), mk("Z", 2)];
        let b = vec![mk("x ", 0), mk("Y", 1), mk("Q", 2)];
        assert_eq!(semantic_prefix_match(&a, &b), 2);
        assert_eq!(semantic_prefix_match(&a, &a), 3);
        let c = vec![mk("different", 0)];
        assert_eq!(semantic_prefix_match(&a, &c), 0);
    }

    #[test]
    fn normalization_preserves_math_case() {
        assert_eq!(normalize_step_text("We Use $X$ Here"), "we use $X$ here");
        assert_eq!(normalize_step_text("  a   B  "), "a b");
    }

    #[test]
    fn display_math_protected_too() {
        let seg = segment("Consider \\[a\nb\\] now", &SegmentationConfig::default());
        assert_eq!(seg.steps.len(), 1);
        let seg2 = segment("Consider $$a\nb$$ now", &SegmentationConfig::default());
        assert_eq!(seg2.steps.len(), 1);
    }
}
