//! Final-answer extraction and mathematical equivalence checking.
//!
//! Extraction precedence: the last `\boxed{...}` span, then the number after
//! a final `Final Answer:` marker, then the last standalone numeric literal.
//! Equivalence is self-contained: integers, fractions, and terminating
//! decimals are cross-normalized through exact rational arithmetic, with a
//! whitespace/brace-insensitive string fallback for symbolic answers.

/// Relative tolerance for comparisons involving a decimal form.
const DECIMAL_RELATIVE_TOLERANCE: f64 = 1e-9;

/// Canonical form of an answer string.
#[derive(Debug, Clone, PartialEq)]
pub enum CanonicalAnswer {
    Integer(i128),
    /// Reduced fraction, denominator strictly positive.
    Rational { num: i128, den: i128 },
    /// Decimal literal held exactly as num/den with den a power of ten.
    Decimal { num: i128, den: i128 },
    /// Whitespace- and brace-stripped fallback form.
    Symbolic(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub raw: String,
    pub canonical: CanonicalAnswer,
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn reduced(num: i128, den: i128) -> Option<(i128, i128)> {
    if den == 0 {
        return None;
    }
    let sign = if den < 0 { -1 } else { 1 };
    let g = gcd(num, den);
    if g == 0 {
        return Some((0, 1));
    }
    Some((sign * num / g, sign * den / g))
}

/// Strip one layer of enclosing markers: `$...$`, `\(...\)`, `\boxed{...}`,
/// `{...}`, and a leading `<var> =` prefix.
fn strip_wrappers(s: &str) -> String {
    let mut cur = s.trim().to_string();
    loop {
        let before = cur.clone();
        if cur.len() >= 2 && cur.starts_with('$') && cur.ends_with('$') {
            cur = cur[1..cur.len() - 1].trim().to_string();
        }
        if cur.len() >= 4 && cur.starts_with("\\(") && cur.ends_with("\\)") {
            cur = cur[2..cur.len() - 2].trim().to_string();
        }
        if cur.starts_with("\\boxed{") && cur.ends_with('}') {
            cur = cur[7..cur.len() - 1].trim().to_string();
        }
        if cur.len() >= 2 && cur.starts_with('{') && cur.ends_with('}') {
            cur = cur[1..cur.len() - 1].trim().to_string();
        }
        if cur == before {
            break;
        }
    }
    // "k = 2" answers carry the variable name; compare the value.
    let bytes = cur.as_bytes();
    let mut i = 0;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
        i += 1;
    }
    if i > 0 && !bytes[..i].iter().all(|b| b.is_ascii_digit()) {
        let rest = cur[i..].trim_start();
        if let Some(stripped) = rest.strip_prefix('=') {
            return stripped.trim().to_string();
        }
    }
    cur
}

/// Rewrite `\frac{a}{b}` (and `\dfrac`, `\tfrac`) into `a/b` when both parts
/// are integer literals.
fn normalize_frac(s: &str) -> String {
    for prefix in ["\\frac", "\\dfrac", "\\tfrac"] {
        if let Some(rest) = s.strip_prefix(prefix) {
            let rest = rest.trim_start();
            if let Some((a, after)) = read_braced(rest) {
                let after = after.trim_start();
                if let Some((b, tail)) = read_braced(after) {
                    if tail.trim().is_empty()
                        && is_integer_literal(a.trim())
                        && is_integer_literal(b.trim())
                    {
                        return format!("{}/{}", a.trim(), b.trim());
                    }
                }
            }
        }
    }
    s.to_string()
}

fn read_braced(s: &str) -> Option<(&str, &str)> {
    let rest = s.strip_prefix('{')?;
    let mut depth = 1;
    for (i, ch) in rest.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((&rest[..i], &rest[i + 1..]));
                }
            }
            _ => {}
        }
    }
    None
}

fn is_integer_literal(s: &str) -> bool {
    let s = s.strip_prefix(['+', '-']).unwrap_or(s);
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Remove thousands separators: commas directly between digits.
fn strip_digit_commas(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    for (i, ch) in s.char_indices() {
        if ch == ','
            && i > 0
            && b[i - 1].is_ascii_digit()
            && i + 1 < b.len()
            && b[i + 1].is_ascii_digit()
        {
            continue;
        }
        out.push(ch);
    }
    out
}

fn parse_decimal(s: &str) -> Option<(i128, i128)> {
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(pos) => {
            let e: i32 = s[pos + 1..].parse().ok()?;
            (&s[..pos], e)
        }
        None => (s, 0),
    };
    let negative = mantissa.starts_with('-');
    let digits = mantissa.strip_prefix(['+', '-']).unwrap_or(mantissa);
    let dot = digits.find('.')?;
    let int_part = &digits[..dot];
    let frac_part = &digits[dot + 1..];
    if frac_part.is_empty() && int_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let mut num: i128 = 0;
    for b in int_part.bytes().chain(frac_part.bytes()) {
        num = num.checked_mul(10)?.checked_add((b - b'0') as i128)?;
    }
    let mut den: i128 = 1;
    for _ in 0..frac_part.len() {
        den = den.checked_mul(10)?;
    }
    let mut e = exp;
    while e > 0 {
        num = num.checked_mul(10)?;
        e -= 1;
    }
    while e < 0 {
        den = den.checked_mul(10)?;
        e += 1;
    }
    if negative {
        num = -num;
    }
    Some((num, den))
}

/// Canonicalize a raw answer string. Deterministic; never fails (unparseable
/// input becomes a symbolic form).
pub fn canonicalize(raw: &str) -> Answer {
    let stripped = strip_wrappers(raw);
    let stripped = normalize_frac(&stripped);
    let compact = strip_digit_commas(stripped.trim());

    if is_integer_literal(&compact) {
        if let Ok(n) = compact.parse::<i128>() {
            return Answer {
                raw: raw.to_string(),
                canonical: CanonicalAnswer::Integer(n),
            };
        }
    }
    if let Some((a, b)) = compact.split_once('/') {
        if is_integer_literal(a.trim()) && is_integer_literal(b.trim()) {
            if let (Ok(n), Ok(d)) = (a.trim().parse::<i128>(), b.trim().parse::<i128>()) {
                if let Some((num, den)) = reduced(n, d) {
                    return Answer {
                        raw: raw.to_string(),
                        canonical: if den == 1 {
                            CanonicalAnswer::Integer(num)
                        } else {
                            CanonicalAnswer::Rational { num, den }
                        },
                    };
                }
            }
        }
    }
    if let Some((num, den)) = parse_decimal(&compact) {
        return Answer {
            raw: raw.to_string(),
            canonical: CanonicalAnswer::Decimal { num, den },
        };
    }
    let symbolic: String = stripped
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '{' && *c != '}')
        .collect();
    Answer {
        raw: raw.to_string(),
        canonical: CanonicalAnswer::Symbolic(symbolic),
    }
}

fn as_fraction(c: &CanonicalAnswer) -> Option<(i128, i128)> {
    match c {
        CanonicalAnswer::Integer(n) => Some((*n, 1)),
        CanonicalAnswer::Rational { num, den } | CanonicalAnswer::Decimal { num, den } => {
            Some((*num, *den))
        }
        CanonicalAnswer::Symbolic(_) => None,
    }
}

fn involves_decimal(c: &CanonicalAnswer) -> bool {
    matches!(c, CanonicalAnswer::Decimal { .. })
}

/// True iff the two answers are mathematically equivalent.
pub fn answers_equivalent(a: &Answer, b: &Answer) -> bool {
    match (as_fraction(&a.canonical), as_fraction(&b.canonical)) {
        (Some((n1, d1)), Some((n2, d2))) => {
            match (n1.checked_mul(d2), n2.checked_mul(d1)) {
                (Some(l), Some(r)) if l == r => return true,
                (Some(_), Some(_)) => {}
                // Cross-multiplication overflow: fall through to the
                // floating comparison below.
                _ => {}
            }
            if involves_decimal(&a.canonical) || involves_decimal(&b.canonical) {
                let x = n1 as f64 / d1 as f64;
                let y = n2 as f64 / d2 as f64;
                let scale = x.abs().max(y.abs());
                return scale > 0.0 && (x - y).abs() <= DECIMAL_RELATIVE_TOLERANCE * scale;
            }
            false
        }
        (None, None) => match (&a.canonical, &b.canonical) {
            (CanonicalAnswer::Symbolic(x), CanonicalAnswer::Symbolic(y)) => x == y,
            _ => unreachable!(),
        },
        _ => false,
    }
}

/// True when the text explicitly marks a final answer (a boxed span or a
/// "Final Answer" line). Used to detect terminal steps during search.
pub fn has_final_marker(text: &str) -> bool {
    text.contains("\\boxed{") || text.to_ascii_lowercase().contains("final answer")
}

fn last_boxed_span(text: &str) -> Option<String> {
    let start = text.rfind("\\boxed{")?;
    let inner_start = start + "\\boxed{".len();
    let mut depth = 1;
    for (i, ch) in text[inner_start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[inner_start..inner_start + i].to_string());
                }
            }
            _ => {}
        }
    }
    // Truncated output: take what is there.
    Some(text[inner_start..].to_string())
}

/// Scan for numeric literals (integers, decimals, simple fractions, with
/// optional digit-group commas). Returns (start, matched text) pairs.
fn numeric_literals(text: &str) -> Vec<(usize, String)> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let sign_start = (c == b'+' || c == b'-') && i + 1 < b.len() && b[i + 1].is_ascii_digit();
        if c.is_ascii_digit() || sign_start {
            let prev_ok = if i == 0 {
                true
            } else {
                let p = b[i - 1];
                !(p.is_ascii_alphanumeric() || p == b'_' || p == b'.' || p == b'/' || p == b',')
            };
            let start = i;
            if sign_start {
                i += 1;
            }
            while i < b.len() && (b[i].is_ascii_digit() || b[i] == b',') {
                i += 1;
            }
            // Fractional or rational continuation.
            if i + 1 < b.len() && (b[i] == b'.' || b[i] == b'/') && b[i + 1].is_ascii_digit() {
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let next_ok = i >= b.len() || {
                let n = b[i];
                !(n.is_ascii_alphanumeric() || n == b'_')
            };
            if prev_ok && next_ok {
                let lit = text[start..i].trim_end_matches(',').to_string();
                out.push((start, lit));
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Extract the final answer from generated text, or `None` when no rule
/// applies.
pub fn extract_final_answer(text: &str) -> Option<Answer> {
    if let Some(inner) = last_boxed_span(text) {
        return Some(canonicalize(&inner));
    }
    let lower = text.to_ascii_lowercase();
    if let Some(pos) = lower.rfind("final answer:") {
        let rest = &text[pos + "final answer:".len()..];
        let line = rest.lines().next().unwrap_or("");
        if let Some((_, lit)) = numeric_literals(line).first() {
            return Some(canonicalize(lit));
        }
    }
    numeric_literals(text)
        .last()
        .map(|(_, lit)| canonicalize(lit))
}
