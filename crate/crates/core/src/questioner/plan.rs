use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::format::{AnswerFormat, QuestionKind, QuestionRequirement};
use super::QuestionerError;
use crate::agents::{extract_json_object, payload_prompt, ChatClient, ChatMessage, ChatRequest, EditOperation};
use crate::capability::CapabilityCategory;
use crate::diagnosis::{DiagnosticReport, DEFAULT_HINT};
use crate::quota::{QuotaLedger, Reservation, ReservationToken};

const N: usize = CapabilityCategory::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDemand {
    pub operation: EditOperation,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    /// Attempt ordinal within the category.
    pub sample_index: u64,
    pub category: CapabilityCategory,
    pub image_req: String,
    #[serde(default)]
    pub search_tags: Vec<String>,
    pub question_req: QuestionRequirement,
    pub answer_format_req: AnswerFormat,
    pub direction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditDemand>,
}

/// A reserved quota slot together with its attempt ordinal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub category: CapabilityCategory,
    pub ordinal: u64,
    pub token: ReservationToken,
}

/// Deficit-weighted draw. Zero weights are never chosen; `None` when all
/// weights are zero.
pub fn choose_category(weights: &[(CapabilityCategory, u64)], rng: &mut impl Rng) -> Option<CapabilityCategory> {
    let total: u64 = weights.iter().map(|(_, w)| w).sum();
    if total == 0 {
        return None;
    }
    let mut x = rng.random_range(0..total);
    for &(c, w) in weights {
        if x < w {
            return Some(c);
        }
        x -= w;
    }
    unreachable!("draw below total weight")
}

struct PickerState {
    issued: [u64; N],
    rng: ChaCha8Rng,
}

/// Issues reserved slots. Each category may be attempted at most
/// `target * (1 + retry_budget)` times; ordinals are handed out together
/// with the reservation so candidate content depends only on
/// `(seed, category, ordinal)` and not on thread timing.
pub struct CategoryPicker<'a> {
    ledger: &'a QuotaLedger,
    caps: [u64; N],
    state: Mutex<PickerState>,
}

impl<'a> CategoryPicker<'a> {
    pub fn new(ledger: &'a QuotaLedger, retry_budget: u32, seed: u64) -> Self {
        let caps = ledger.targets().map(|m| m.saturating_mul(1 + retry_budget as u64));
        Self {
            ledger,
            caps,
            state: Mutex::new(PickerState { issued: [0; N], rng: ChaCha8Rng::seed_from_u64(seed ^ 0x504c_414e) }),
        }
    }

    pub fn ledger(&self) -> &QuotaLedger {
        self.ledger
    }

    /// Attempts issued so far per category, canonical order.
    pub fn issued(&self) -> [u64; N] {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).issued
    }

    pub fn next_slot(&self) -> Option<Slot> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let deficits = self.ledger.deficits();
        let weights: Vec<(CapabilityCategory, u64)> = CapabilityCategory::ALL
            .iter()
            .map(|&c| {
                let i = c.index();
                (c, if st.issued[i] < self.caps[i] { deficits[i] } else { 0 })
            })
            .collect();
        let category = choose_category(&weights, &mut st.rng)?;
        let Reservation::Granted(token) = self.ledger.reserve(category) else {
            unreachable!("positive deficit under the picker lock")
        };
        let ordinal = st.issued[category.index()];
        st.issued[category.index()] += 1;
        Some(Slot { category, ordinal, token })
    }
}

const PLANNER_INSTRUCTION: &str = "You are the planning agent of a training-data generator. Given a capability \
category, its observed failure patterns and generation hints, write an executable plan for one new sample: the \
image requirement (what the image must show, including structural elements), optional search tags, the question \
kind (multiple-choice, numeric or short-text), whether the answer needs a unit, whether the question must state its \
answer format, a one-sentence direction targeting the weakness, and an optional image edit (crop, overlay_text, \
stitch or fuse). Reply with a JSON object {\"image_req\": string, \"search_tags\": [string], \"question_kind\": \
string, \"unit_required\": bool, \"structured_output\": bool, \"direction\": string, \"edit\": null | \
{\"operation\": string, \"instruction\": string}}.";

pub(crate) fn plan_payload(report: &DiagnosticReport, slot: &Slot) -> Value {
    let c = slot.category;
    json!({
        "iteration": report.iteration,
        "category": c.id(),
        "category_name": c.display_name(),
        "sample_index": slot.ordinal,
        "failure_patterns": report.failures_for(c),
        "hints": report.hint_for(c).directives,
    })
}

fn unparseable(detail: impl Into<String>) -> QuestionerError {
    QuestionerError::Unparseable { role: "planner", detail: detail.into() }
}

fn parse_plan(reply: &str, report: &DiagnosticReport, slot: &Slot) -> Result<GenerationPlan, QuestionerError> {
    let v = extract_json_object(reply).ok_or_else(|| unparseable("no JSON object"))?;
    let text = |k: &str| v.get(k).and_then(Value::as_str).map(str::trim).unwrap_or("").to_string();
    let image_req = text("image_req");
    if image_req.is_empty() {
        return Err(unparseable("empty image_req"));
    }
    let kind = QuestionKind::parse(&text("question_kind")).ok_or_else(|| unparseable("unknown question_kind"))?;
    let flag = |k: &str| v.get(k).and_then(Value::as_bool).unwrap_or(false);
    let question_req = QuestionRequirement {
        kind,
        unit_required: flag("unit_required") && kind == QuestionKind::Numeric,
        structured_output: flag("structured_output"),
    };
    let mut direction = text("direction");
    if direction.is_empty() {
        direction = report.hint_for(slot.category).directives.first().cloned().unwrap_or_else(|| DEFAULT_HINT.into());
    }
    let edit = match v.get("edit") {
        None | Some(Value::Null) => None,
        Some(e) => {
            let d: EditDemand = serde_json::from_value(e.clone()).map_err(|e| unparseable(format!("edit: {e}")))?;
            if d.instruction.trim().is_empty() {
                return Err(unparseable("empty edit instruction"));
            }
            Some(d)
        }
    };
    let search_tags = v
        .get("search_tags")
        .and_then(Value::as_array)
        .map(|t| t.iter().filter_map(Value::as_str).map(str::to_string).filter(|s| !s.trim().is_empty()).collect())
        .unwrap_or_default();
    Ok(GenerationPlan {
        sample_index: slot.ordinal,
        category: slot.category,
        image_req,
        search_tags,
        question_req,
        answer_format_req: AnswerFormat::for_requirement(&question_req),
        direction,
        edit,
    })
}

/// Ask the planner agent to fill in a plan for an already reserved slot.
pub fn request_plan(
    report: &DiagnosticReport,
    slot: &Slot,
    planner: &dyn ChatClient,
) -> Result<GenerationPlan, QuestionerError> {
    let prompt = payload_prompt(PLANNER_INSTRUCTION, &plan_payload(report, slot));
    let reply = planner.chat(&ChatRequest::new(planner.model(), vec![ChatMessage::user(prompt)]))?;
    parse_plan(&reply.text, report, slot)
}

#[derive(Debug)]
pub enum PlanOutcome {
    Plan { plan: GenerationPlan, slot: Slot, failed_attempts: u64 },
    /// No category has both a deficit and attempts left.
    Done { failed_attempts: u64 },
}

/// Reserve a slot and obtain its plan. Planner failures release the slot
/// and retry on a fresh attempt until the picker runs out.
pub fn plan_next(
    report: &DiagnosticReport,
    picker: &CategoryPicker<'_>,
    planner: &dyn ChatClient,
) -> Result<PlanOutcome, QuestionerError> {
    let mut failed_attempts = 0;
    while let Some(slot) = picker.next_slot() {
        match request_plan(report, &slot, planner) {
            Ok(plan) => return Ok(PlanOutcome::Plan { plan, slot, failed_attempts }),
            Err(e) => {
                tracing::debug!(category = %slot.category, ordinal = slot.ordinal, error = %e, "planning failed");
                picker.ledger().release(&slot.token)?;
                failed_attempts += 1;
            }
        }
    }
    Ok(PlanOutcome::Done { failed_attempts })
}
