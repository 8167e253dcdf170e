use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::capability::{parse_number_with_unit, AnswerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    MultipleChoice,
    Numeric,
    ShortText,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MultipleChoice => "multiple-choice",
            Self::Numeric => "numeric",
            Self::ShortText => "short-text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "multiple-choice" | "choice" | "mcq" => Some(Self::MultipleChoice),
            "numeric" | "number" => Some(Self::Numeric),
            "short-text" | "text" | "short-answer" => Some(Self::ShortText),
            _ => None,
        }
    }

    pub fn answer_kind(self) -> AnswerKind {
        match self {
            Self::MultipleChoice => AnswerKind::Choice,
            Self::Numeric => AnswerKind::Numeric,
            Self::ShortText => AnswerKind::Exact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRequirement {
    pub kind: QuestionKind,
    pub unit_required: bool,
    /// The question must spell out the expected answer format.
    pub structured_output: bool,
}

/// Output constraint on the reference answer, checked by the format gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum AnswerFormat {
    OptionLetter,
    Number,
    NumberWithUnit,
    ShortText { max_words: usize },
}

pub const SHORT_TEXT_MAX_WORDS: usize = 5;

static OPTION_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)(?:^|\s)(?:\(([A-H])\)|([A-H])[.):])\s+\S").unwrap());
static FORMAT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)answer\s+format\s*:").unwrap());
static LETTER_ANSWER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\(?([A-H])\)?\.?$").unwrap());

/// Option labels found in a question, e.g. `(A) 3` or `B. 4`.
pub fn option_labels(question: &str) -> BTreeSet<char> {
    OPTION_LABEL
        .captures_iter(question)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .filter_map(|m| m.as_str().chars().next())
        .collect()
}

impl AnswerFormat {
    pub fn for_requirement(req: &QuestionRequirement) -> Self {
        match req.kind {
            QuestionKind::MultipleChoice => Self::OptionLetter,
            QuestionKind::Numeric if req.unit_required => Self::NumberWithUnit,
            QuestionKind::Numeric => Self::Number,
            QuestionKind::ShortText => Self::ShortText { max_words: SHORT_TEXT_MAX_WORDS },
        }
    }

    /// Instruction handed to the generator.
    pub fn instruction(&self) -> String {
        match self {
            Self::OptionLetter => "list at least two labeled options (A), (B), ... in the question; the answer is a single option letter".into(),
            Self::Number => "the answer is a bare number without units".into(),
            Self::NumberWithUnit => "the answer is a number followed by its unit, e.g. `12.5 cm`".into(),
            Self::ShortText { max_words } => format!("the answer is a short phrase of at most {max_words} words"),
        }
    }

    /// Local format check of one (question, answer) pair.
    pub fn check(&self, question: &str, answer: &str) -> bool {
        let answer = answer.trim();
        match self {
            Self::OptionLetter => {
                let labels = option_labels(question);
                let letter = LETTER_ANSWER.captures(answer).and_then(|c| c[1].chars().next());
                labels.len() >= 2 && letter.is_some_and(|l| labels.contains(&l))
            }
            Self::Number => matches!(parse_number_with_unit(answer), Some((_, None))),
            Self::NumberWithUnit => matches!(parse_number_with_unit(answer), Some((_, Some(_)))),
            Self::ShortText { max_words } => {
                let words = answer.split_whitespace().count();
                words >= 1 && words <= *max_words
            }
        }
    }
}

pub(crate) fn states_answer_format(question: &str) -> bool {
    FORMAT_LINE.is_match(question)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_detection() {
        let q = "Which bar is tallest?\n(A) red\n(B) blue\n(C) green";
        assert_eq!(option_labels(q), ['A', 'B', 'C'].into());
        assert_eq!(option_labels("Pick one: A. 3 B. 4"), ['A', 'B'].into());
        assert!(option_labels("Which bar is tallest?").is_empty());
        assert!(AnswerFormat::OptionLetter.check(q, "B"));
        assert!(AnswerFormat::OptionLetter.check(q, "(C)"));
        assert!(!AnswerFormat::OptionLetter.check(q, "D"));
        assert!(!AnswerFormat::OptionLetter.check("Which bar is tallest?", "A"));
    }

    #[test]
    fn numeric_formats() {
        assert!(AnswerFormat::NumberWithUnit.check("", "12.5 cm"));
        assert!(!AnswerFormat::NumberWithUnit.check("", "12.5"));
        assert!(AnswerFormat::Number.check("", "1,200"));
        assert!(!AnswerFormat::Number.check("", "12 kg"));
        assert!(!AnswerFormat::Number.check("", "about twelve"));
        assert!(AnswerFormat::ShortText { max_words: 3 }.check("", "left lung"));
        assert!(!AnswerFormat::ShortText { max_words: 3 }.check("", "a b c d"));
    }

    #[test]
    fn requirement_mapping() {
        let req = |kind, unit_required| QuestionRequirement { kind, unit_required, structured_output: false };
        assert_eq!(AnswerFormat::for_requirement(&req(QuestionKind::Numeric, true)), AnswerFormat::NumberWithUnit);
        assert_eq!(AnswerFormat::for_requirement(&req(QuestionKind::MultipleChoice, true)), AnswerFormat::OptionLetter);
        assert_eq!(QuestionKind::parse("Multiple choice"), Some(QuestionKind::MultipleChoice));
        assert_eq!(QuestionKind::parse("essay"), None);
        assert!(states_answer_format("How far?\nAnswer format: number with unit"));
    }
}
