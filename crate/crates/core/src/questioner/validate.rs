use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::format::states_answer_format;
use super::plan::GenerationPlan;
use super::QuestionerError;
use crate::agents::{extract_json_object, payload_prompt, AgentError, ChatClient, ChatMessage, ChatRequest};
use crate::capability::{AnswerKey, AnswerKind, CapabilityCategory, ImageAsset};
use crate::diagnosis::GenerationHint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub question: String,
    pub answer: String,
    pub answer_kind: AnswerKind,
}

const GENERATOR_INSTRUCTION: &str = "You write one visual question about the given image. Follow the question \
kind, answer format and direction exactly; multiple-choice questions must list their labeled options in the \
question text. The reference answer must be derivable from the image alone. Reply with a JSON object \
{\"question\": string, \"answer\": string, \"answer_kind\": \"exact\" | \"numeric\" | \"choice\"}.";

const REPAIR_NOTE: &str = "Your previous reply could not be parsed. Reply with only the JSON object.";

fn generator_payload(image: &ImageAsset, plan: &GenerationPlan, hints: &GenerationHint) -> Value {
    json!({
        "category": plan.category.id(),
        "category_name": plan.category.display_name(),
        "sample_index": plan.sample_index,
        "image": image.locator(),
        "image_req": plan.image_req,
        "question_kind": plan.question_req.kind.as_str(),
        "unit_required": plan.question_req.unit_required,
        "structured_output": plan.question_req.structured_output,
        "answer_format": plan.answer_format_req.instruction(),
        "direction": plan.direction,
        "hints": hints.directives,
    })
}

fn parse_generated(reply: &str, plan: &GenerationPlan) -> Option<GeneratedQuestion> {
    let v = extract_json_object(reply)?;
    let question = v.get("question")?.as_str()?.trim().to_string();
    let answer = match v.get("answer")? {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        _ => return None,
    };
    if question.is_empty() || answer.is_empty() {
        return None;
    }
    let answer_kind = match v.get("answer_kind") {
        None | Some(Value::Null) => plan.question_req.kind.answer_kind(),
        Some(k) => serde_json::from_value(k.clone()).ok()?,
    };
    Some(GeneratedQuestion { question, answer, answer_kind })
}

/// Ask the generator for a (question, answer) pair. Unparseable replies are
/// re-requested up to `parse_retries` times.
pub fn generate_question(
    image: &ImageAsset,
    plan: &GenerationPlan,
    hints: &GenerationHint,
    generator: &dyn ChatClient,
    parse_retries: u32,
) -> Result<GeneratedQuestion, QuestionerError> {
    let prompt = payload_prompt(GENERATOR_INSTRUCTION, &generator_payload(image, plan, hints));
    let mut messages = vec![ChatMessage::user(prompt).with_image(image.locator())];
    let mut last = String::new();
    for _ in 0..=parse_retries {
        let reply = generator.chat(&ChatRequest::new(generator.model(), messages.clone()))?;
        if let Some(q) = parse_generated(&reply.text, plan) {
            return Ok(q);
        }
        last = reply.text.chars().take(200).collect();
        messages.push(ChatMessage { role: "assistant".into(), text: reply.text, images: vec![] });
        messages.push(ChatMessage::user(REPAIR_NOTE));
    }
    Err(QuestionerError::Unparseable { role: "generator", detail: last })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gates {
    pub cat: bool,
    pub sol: bool,
    pub ver: bool,
    pub fmt: bool,
}

impl Gates {
    pub fn accepted(&self) -> bool {
        self.cat && self.sol && self.ver && self.fmt
    }

    pub fn as_json(&self) -> Value {
        json!({"cat": u8::from(self.cat), "sol": u8::from(self.sol), "ver": u8::from(self.ver), "fmt": u8::from(self.fmt)})
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSample {
    pub plan: GenerationPlan,
    pub image: ImageAsset,
    pub question: String,
    pub answer: String,
    pub answer_kind: AnswerKind,
    pub category: CapabilityCategory,
    /// `None` until validated, and when the validator could not be reached.
    pub gates: Option<Gates>,
}

impl CandidateSample {
    pub fn new(plan: GenerationPlan, image: ImageAsset, generated: GeneratedQuestion) -> Self {
        Self {
            category: plan.category,
            plan,
            image,
            question: generated.question,
            answer: generated.answer,
            answer_kind: generated.answer_kind,
            gates: None,
        }
    }

    pub fn accepted(&self) -> bool {
        self.gates.is_some_and(|g| g.accepted())
    }

    pub fn answer_key(&self) -> AnswerKey {
        AnswerKey::new(self.answer.clone(), self.answer_kind)
    }
}

/// Format gate: answer kind agrees with the requested question kind, the
/// answer obeys the format constraint, and the question states its format
/// when structured output was requested.
pub fn check_format(plan: &GenerationPlan, question: &str, answer: &str, kind: AnswerKind) -> bool {
    kind == plan.question_req.kind.answer_kind()
        && plan.answer_format_req.check(question, answer)
        && (!plan.question_req.structured_output || states_answer_format(question))
}

const VALIDATOR_INSTRUCTION: &str = "You are a validation agent. Given an image, a question and its reference \
answer, decide (1) whether the image and question belong to the stated capability category and (2) whether the \
question is answerable from the image alone with complete information. Reply with a JSON object \
{\"category_match\": bool, \"solvable\": bool, \"reason\": string}.";

fn ask_validator(candidate: &CandidateSample, validator: &dyn ChatClient) -> Result<(bool, bool), AgentError> {
    let payload = json!({
        "category": candidate.category.id(),
        "category_name": candidate.category.display_name(),
        "image": candidate.image.locator(),
        "question": candidate.question,
        "answer": candidate.answer,
        "answer_kind": candidate.answer_kind.as_str(),
    });
    let msg = ChatMessage::user(payload_prompt(VALIDATOR_INSTRUCTION, &payload)).with_image(candidate.image.locator());
    let reply = validator.chat(&ChatRequest::new(validator.model(), vec![msg]))?;
    let v = extract_json_object(&reply.text).ok_or_else(|| AgentError::Malformed("validator reply has no JSON object".into()))?;
    let flag = |k: &str| v.get(k).and_then(Value::as_bool);
    match (flag("category_match"), flag("solvable")) {
        (Some(cat), Some(sol)) => Ok((cat, sol)),
        _ => Err(AgentError::Malformed("validator reply lacks category_match/solvable".into())),
    }
}

/// Set all four gates. Category and solvability come from the validator
/// agent; verifiability and format are checked locally. A validator that
/// fails or answers off-schema leaves the candidate unvalidated.
pub fn validate(mut candidate: CandidateSample, validator: &dyn ChatClient) -> CandidateSample {
    candidate.gates = match ask_validator(&candidate, validator) {
        Ok((cat, sol)) => Some(Gates {
            cat,
            sol,
            ver: candidate.answer_key().is_checkable(),
            fmt: check_format(&candidate.plan, &candidate.question, &candidate.answer, candidate.answer_kind),
        }),
        Err(e) => {
            tracing::debug!(category = %candidate.category, error = %e, "candidate left unvalidated");
            None
        }
    };
    candidate
}
