//! Final-answer extraction from generated text.
//!
//! Math answers come from the last top-level `\boxed{...}` span (brace
//! matching, escaped `\{`/`\}` ignored), with an "answer is ..." prefix
//! heuristic as fallback. Code answers go through a staged heuristic: fenced
//! block, then keyword recovery, then signature injection when the expected
//! function header is missing.
//!
//! Normalisation is purely string-level.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

const BOX_OPEN: &str = "\\boxed{";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Boxed,
    PrefixHeuristic,
    CodeBlock,
    KeywordRecovery,
    SignatureInjected,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub raw_span: String,
    pub normalized: String,
    pub method: ExtractionMethod,
    /// The closing delimiter was found.
    pub complete: bool,
}

impl ExtractionResult {
    fn none() -> Self {
        Self {
            raw_span: String::new(),
            normalized: String::new(),
            method: ExtractionMethod::None,
            complete: false,
        }
    }

    fn from_span(raw: &str, normalized: String, method: ExtractionMethod, complete: bool) -> Self {
        if normalized.is_empty() {
            return Self::none();
        }
        Self {
            raw_span: raw.to_string(),
            normalized,
            method,
            complete,
        }
    }
}

/// Byte range of the content of the last top-level boxed span and whether it
/// was closed.
pub fn last_boxed_span(text: &str) -> Option<(usize, usize, bool)> {
    let bytes = text.as_bytes();
    let open = BOX_OPEN.as_bytes();
    let mut last = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i..].starts_with(open) {
            let start = i + open.len();
            let mut depth = 1usize;
            let mut j = start;
            while j < bytes.len() && depth > 0 {
                match bytes[j] {
                    b'\\' => {
                        // skip escaped character (\{, \}, \\)
                        j += 2;
                        continue;
                    }
                    b'{' => depth += 1,
                    b'}' => depth -= 1,
                    _ => {}
                }
                j += 1;
            }
            let j = j.min(bytes.len());
            if depth == 0 {
                last = Some((start, j - 1, true));
                i = j;
            } else {
                last = Some((start, bytes.len(), false));
                break;
            }
        } else {
            i += 1;
        }
    }
    last
}

pub fn extract_boxed(text: &str) -> ExtractionResult {
    match last_boxed_span(text) {
        Some((s, e, complete)) => {
            let raw = &text[s..e];
            ExtractionResult::from_span(raw, normalize_answer(raw), ExtractionMethod::Boxed, complete)
        }
        None => ExtractionResult::none(),
    }
}

static ANSWER_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:the (?:final )?answer is|\*\*answer\*\*:|answer:)\s*([^\n]+)").unwrap()
});

/// Boxed extraction with a fallback on "the answer is X" style phrasing.
pub fn extract_answer(text: &str) -> ExtractionResult {
    let boxed = extract_boxed(text);
    if boxed.method != ExtractionMethod::None {
        return boxed;
    }
    match ANSWER_PREFIX.captures_iter(text).last() {
        Some(c) => {
            let raw = c.get(1).map_or("", |m| m.as_str());
            ExtractionResult::from_span(
                raw,
                normalize_answer(raw),
                ExtractionMethod::PrefixHeuristic,
                true,
            )
        }
        None => ExtractionResult::none(),
    }
}

static WHITESPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").unwrap());
static LEFT_RIGHT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\\(?:left|right)([^A-Za-z]|$)").unwrap());
static THOUSANDS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?\d{1,3}(?:,\d{3})+(?:\.\d+)?$").unwrap());
static PLAIN_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?\d+(?:\.\d+)?$").unwrap());

fn normalize_once(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    while s.len() >= 2 && s.starts_with('$') && s.ends_with('$') {
        s = s[1..s.len() - 1].trim().to_string();
    }
    s = LEFT_RIGHT.replace_all(&s, "$1").into_owned();
    s = s.replace("\\dfrac", "\\frac");
    s = WHITESPACE.replace_all(&s, " ").trim().to_string();
    while s.ends_with('.') {
        s.pop();
    }
    let s = s.trim_end().to_string();
    canonical_number(&s).unwrap_or(s)
}

fn canonical_number(s: &str) -> Option<String> {
    let mut n = if THOUSANDS.is_match(s) {
        s.replace(',', "")
    } else if PLAIN_NUMBER.is_match(s) {
        s.to_string()
    } else {
        return None;
    };
    if let Some(rest) = n.strip_prefix('+') {
        n = rest.to_string();
    }
    if n.contains('.') {
        while n.ends_with('0') {
            n.pop();
        }
        if n.ends_with('.') {
            n.pop();
        }
    }
    if n == "-0" {
        n = "0".into();
    }
    Some(n)
}

/// String-level canonical form of an answer. Idempotent.
pub fn normalize_answer(raw: &str) -> String {
    let mut cur = normalize_once(raw);
    // each pass only shortens or keeps the string, so this terminates
    loop {
        let next = normalize_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)(```|\z)").unwrap());
const CODE_KEYWORDS: [&str; 4] = ["import ", "from ", "def ", "return "];
const STOP_MARKERS: [&str; 2] = ["Problem:", "Tests:"];

fn function_name(signature: &str) -> Option<&str> {
    let rest = signature.trim().strip_prefix("def ")?;
    let end = rest.find('(')?;
    Some(rest[..end].trim())
}

fn has_signature(code: &str, signature: &str) -> bool {
    match function_name(signature) {
        Some(name) => code.lines().any(|l| {
            l.trim_start()
                .strip_prefix("def ")
                .is_some_and(|r| r.trim_start().starts_with(name) && r[name.len()..].trim_start().starts_with('('))
        }),
        None => code.contains(signature.trim()),
    }
}

fn inject_signature(code: &str, signature: &str) -> String {
    let mut out = String::from(signature.trim_end());
    out.push('\n');
    for line in code.lines() {
        if line.trim().is_empty() {
            out.push('\n');
        } else if line.starts_with(' ') || line.starts_with('\t') {
            out.push_str(line);
            out.push('\n');
        } else {
            out.push_str("    ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Locates code in a completion and makes sure it defines `canonical_signature`.
pub fn extract_code(text: &str, canonical_signature: &str) -> ExtractionResult {
    let fenced = FENCE
        .captures_iter(text)
        .map(|c| {
            let lang = c.get(1).map_or("", |m| m.as_str()).to_ascii_lowercase();
            let body = c.get(2).map_or("", |m| m.as_str());
            let closed = c.get(3).is_some_and(|m| !m.as_str().is_empty());
            (lang, body, closed)
        })
        .collect::<Vec<_>>();
    let chosen = fenced
        .iter()
        .find(|(lang, ..)| lang == "python" || lang == "py")
        .or_else(|| fenced.first());

    let (code, method, complete) = if let Some((_, body, closed)) = chosen {
        (body.to_string(), ExtractionMethod::CodeBlock, *closed)
    } else {
        let lines: Vec<&str> = text.lines().collect();
        let start = lines.iter().position(|l| {
            let t = l.trim_start();
            CODE_KEYWORDS.iter().any(|k| t.starts_with(k))
        });
        let Some(start) = start else {
            return ExtractionResult::none();
        };
        let end = lines[start + 1..]
            .iter()
            .position(|l| STOP_MARKERS.iter().any(|m| l.trim_start().starts_with(m)))
            .map_or(lines.len(), |p| start + 1 + p);
        let mut code = lines[start..end].join("\n");
        code.truncate(code.trim_end().len());
        code.push('\n');
        (code, ExtractionMethod::KeywordRecovery, true)
    };

    if code.trim().is_empty() {
        return ExtractionResult::none();
    }
    if !canonical_signature.trim().is_empty() && !has_signature(&code, canonical_signature) {
        let injected = inject_signature(&code, canonical_signature);
        return ExtractionResult {
            raw_span: code,
            normalized: injected,
            method: ExtractionMethod::SignatureInjected,
            complete,
        };
    }
    ExtractionResult {
        raw_span: code.clone(),
        normalized: code,
        method,
        complete,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_box() {
        let r = extract_boxed("so we get \\boxed{42}");
        assert_eq!(r.normalized, "42");
        assert!(r.complete);
        assert_eq!(r.method, ExtractionMethod::Boxed);
    }

    #[test]
    fn nested_braces() {
        let r = extract_boxed("thus \\boxed{\\frac{1}{2}} done");
        assert_eq!(r.normalized, "\\frac{1}{2}");
        assert_eq!(r.raw_span, "\\frac{1}{2}");
    }

    #[test]
    fn truncated_box() {
        let r = extract_boxed("the answer is \\boxed{7");
        assert_eq!(r.normalized, "7");
        assert!(!r.complete);
        assert_eq!(r.method, ExtractionMethod::Boxed);
    }

    #[test]
    fn last_box_wins_and_escapes_are_skipped() {
        let r = extract_boxed("\\boxed{1} then \\boxed{\\{a\\}} and text");
        assert_eq!(r.raw_span, "\\{a\\}");
        let r = extract_boxed("\\boxed{x + \\boxed{y}} z");
        assert_eq!(r.raw_span, "x + \\boxed{y}");
    }

    #[test]
    fn no_box_or_empty_box() {
        assert_eq!(extract_boxed("nothing here").method, ExtractionMethod::None);
        let r = extract_boxed("\\boxed{ }");
        assert_eq!(r.method, ExtractionMethod::None);
        assert!(r.normalized.is_empty());
    }

    #[test]
    fn prefix_heuristic_fallback() {
        let r = extract_answer("blah\nSo, the answer is 1,234.");
        assert_eq!(r.method, ExtractionMethod::PrefixHeuristic);
        assert_eq!(r.normalized, "1234");
        assert_eq!(extract_answer("\\boxed{5}").method, ExtractionMethod::Boxed);
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer(" 1,000 "), "1000");
        assert_eq!(normalize_answer("$\\dfrac{1}{2}$"), "\\frac{1}{2}");
        assert_eq!(normalize_answer("3.0"), "3");
        assert_eq!(normalize_answer("+12"), "12");
        assert_eq!(normalize_answer("2.50"), "2.5");
        assert_eq!(normalize_answer("x  =\n 5."), "x = 5");
        assert_eq!(normalize_answer("\\left( 1, 2 \\right)"), "( 1, 2 )");
        assert_eq!(normalize_answer("a \\rightarrow b"), "a \\rightarrow b");
        assert_eq!(normalize_answer("$$7$$"), "7");
        assert_eq!(normalize_answer("1,2"), "1,2");
    }

    #[test]
    fn fenced_code_block_verbatim() {
        let text = "Here you go:\n```python\ndef rev(s):\n    return s[::-1]\n```\nDone.";
        let r = extract_code(text, "def rev(s):");
        assert_eq!(r.method, ExtractionMethod::CodeBlock);
        assert_eq!(r.normalized, "def rev(s):\n    return s[::-1]\n");
        assert!(r.complete);
    }

    #[test]
    fn signature_injected_when_missing() {
        let r = extract_code("return s[::-1]", "def rev(s):");
        assert_eq!(r.method, ExtractionMethod::SignatureInjected);
        assert!(r.normalized.starts_with("def rev(s):"));
        assert_eq!(r.normalized, "def rev(s):\n    return s[::-1]\n");
    }

    #[test]
    fn keyword_recovery() {
        let text = "Sure! I think this works.\nimport math\ndef area(r):\n    return math.pi * r * r\nTests:\nassert area(1) > 3";
        let r = extract_code(text, "def area(r):");
        assert_eq!(r.method, ExtractionMethod::KeywordRecovery);
        assert!(r.normalized.starts_with("import math"));
        assert!(!r.normalized.contains("assert"));
    }

    #[test]
    fn prose_without_code() {
        let r = extract_code("I am not sure how to solve this.", "def f(x):");
        assert_eq!(r.method, ExtractionMethod::None);
        assert!(r.normalized.is_empty());
    }

    #[test]
    fn unclosed_fence_is_incomplete() {
        let r = extract_code("```python\ndef f(x):\n    return x", "def f(x):");
        assert_eq!(r.method, ExtractionMethod::CodeBlock);
        assert!(!r.complete);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ 0-9a-z$.,+\\-{}\\\\]{0,24}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn boxed_idempotent_on_own_output(body in "[0-9a-z+\\-{} ]{0,16}", pre in "[a-z ]{0,8}") {
            let r = extract_boxed(&format!("{pre}\\boxed{{{body}}}"));
            if r.complete {
                let again = extract_boxed(&format!("\\boxed{{{}}}", r.normalized));
                prop_assert_eq!(again.normalized, r.normalized);
            }
        }

        #[test]
        fn boxed_never_panics(s in "\\PC{0,64}") {
            let _ = extract_boxed(&s);
            let _ = extract_answer(&s);
            let _ = extract_code(&s, "def f(x):");
        }
    }
}
