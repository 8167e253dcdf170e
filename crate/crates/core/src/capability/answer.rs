use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// How a reference answer is compared against a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Exact,
    Numeric,
    Choice,
}

impl AnswerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Numeric => "numeric",
            Self::Choice => "choice",
        }
    }
}

/// `|a - b| <= max(rel * |reference|, abs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericTolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for NumericTolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-9 }
    }
}

impl NumericTolerance {
    pub fn relative(rel: f64) -> Self {
        Self { rel, ..Self::default() }
    }
}

/// A machine-checkable reference answer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerKey {
    pub text: String,
    pub kind: AnswerKind,
    pub tolerance: NumericTolerance,
}

static NUMBER_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*([-+]?(?:\d[\d,]*\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([^\d\s].*?)?\s*\.?\s*$").unwrap()
});
static OPTION_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:option\s+)?\(?([A-Za-z])\)?(?:[.):\s]|$)").unwrap());
static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:final\s+answer|answer)\s*[:：]\s*(.+?)\s*$").unwrap());
static BOXED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\\boxed\{([^{}]*)\}").unwrap());

/// Split `"12.5 cm"` into `(12.5, Some("cm"))`. Thousands separators are
/// accepted; anything that does not start with a number is rejected.
pub fn parse_number_with_unit(text: &str) -> Option<(f64, Option<String>)> {
    let caps = NUMBER_UNIT.captures(text)?;
    let number: f64 = caps[1].replace(',', "").parse().ok()?;
    if !number.is_finite() {
        return None;
    }
    let unit = caps
        .get(2)
        .map(|m| m.as_str().trim().trim_end_matches('.').to_lowercase())
        .filter(|u| !u.is_empty());
    Some((number, unit))
}

/// Pull the final answer out of a free-form response: a `\boxed{..}` value,
/// else the last `Answer:` line, else the last non-empty line.
pub fn extract_final_answer(response: &str) -> String {
    if let Some(c) = BOXED.captures_iter(response).last() {
        return c[1].trim().to_string();
    }
    if let Some(c) = response.lines().filter_map(|l| ANSWER_LINE.captures(l)).next_back() {
        return c[1].to_string();
    }
    response
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .next_back()
        .unwrap_or("")
        .to_string()
}

fn normalize_text(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
        .trim_end_matches('.')
        .trim()
        .to_string()
}

fn option_letter(s: &str) -> Option<char> {
    OPTION_LETTER
        .captures(s)
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

impl AnswerKey {
    pub fn new(text: impl Into<String>, kind: AnswerKind) -> Self {
        Self { text: text.into(), kind, tolerance: NumericTolerance::default() }
    }

    pub fn with_tolerance(mut self, tolerance: NumericTolerance) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// Whether the reference itself can be checked mechanically.
    pub fn is_checkable(&self) -> bool {
        match self.kind {
            AnswerKind::Exact => !normalize_text(&self.text).is_empty(),
            AnswerKind::Numeric => parse_number_with_unit(&self.text).is_some(),
            AnswerKind::Choice => {
                let t = self.text.trim();
                t.len() == 1 && t.chars().all(|c| c.is_ascii_alphabetic())
            }
        }
    }

    /// Compare an already-extracted final answer against this key.
    ///
    /// Numeric answers must agree within tolerance; if both sides carry a
    /// unit the units must match, a missing unit in the candidate is accepted.
    pub fn matches(&self, candidate: &str) -> bool {
        match self.kind {
            AnswerKind::Exact => {
                let c = normalize_text(candidate);
                !c.is_empty() && c == normalize_text(&self.text)
            }
            AnswerKind::Numeric => {
                let (Some((want, want_unit)), Some((got, got_unit))) =
                    (parse_number_with_unit(&self.text), parse_number_with_unit(candidate))
                else {
                    return false;
                };
                if let (Some(a), Some(b)) = (&want_unit, &got_unit) {
                    if a != b {
                        return false;
                    }
                }
                let bound = (self.tolerance.rel * want.abs()).max(self.tolerance.abs);
                (want - got).abs() <= bound
            }
            AnswerKind::Choice => match (option_letter(&self.text), option_letter(candidate)) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            },
        }
    }

    /// Extract the final answer from a full response, then compare.
    pub fn matches_response(&self, response: &str) -> bool {
        self.matches(&extract_final_answer(response))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_is_case_and_space_insensitive() {
        let key = AnswerKey::new("42", AnswerKind::Exact);
        assert!(key.matches("42"));
        assert!(key.matches(" 42. "));
        assert!(!key.matches("43"));
        assert!(AnswerKey::new("Red  Car", AnswerKind::Exact).matches("red car"));
        assert!(!AnswerKey::new("x", AnswerKind::Exact).matches(""));
    }

    #[test]
    fn numeric_within_tolerance() {
        let key = AnswerKey::new("3.14159", AnswerKind::Numeric).with_tolerance(NumericTolerance::relative(1e-3));
        assert!(key.matches("3.1416"));
        assert!(!key.matches("3.15"));
        let strict = AnswerKey::new("3.14159", AnswerKind::Numeric);
        assert!(!strict.matches("3.1"));
        assert!(AnswerKey::new("0", AnswerKind::Numeric).matches("0.0000000001"));
    }

    #[test]
    fn numeric_units() {
        assert_eq!(parse_number_with_unit("12.5 cm"), Some((12.5, Some("cm".into()))));
        assert_eq!(parse_number_with_unit("1,200"), Some((1200.0, None)));
        assert_eq!(parse_number_with_unit("45%"), Some((45.0, Some("%".into()))));
        assert_eq!(parse_number_with_unit("about 3"), None);
        let key = AnswerKey::new("12.5 cm", AnswerKind::Numeric);
        assert!(key.matches("12.5 CM"));
        assert!(key.matches("12.5"));
        assert!(!key.matches("12.5 kg"));
    }

    #[test]
    fn choice_letters() {
        let key = AnswerKey::new("B", AnswerKind::Choice);
        for ok in ["B", "b", "(B)", "B.", "B) blue", "option B"] {
            assert!(key.matches(ok), "{ok}");
        }
        assert!(!key.matches("C"));
        assert!(!key.matches(""));
        assert!(key.is_checkable());
        assert!(!AnswerKey::new("BC", AnswerKind::Choice).is_checkable());
    }

    #[test]
    fn extracts_final_answer() {
        assert_eq!(extract_final_answer("step 1\nstep 2\nAnswer: 7"), "7");
        assert_eq!(extract_final_answer("so \\boxed{12} is it"), "12");
        assert_eq!(extract_final_answer("reasoning\n\nC\n"), "C");
        assert!(AnswerKey::new("7", AnswerKind::Numeric).matches_response("think\nFinal answer: 7.0"));
    }
}
