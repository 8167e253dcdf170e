//! Multi-agent question generation: planner, image selector, question
//! generator and validator, driven against a quota ledger.

mod format;
mod plan;
mod run;
mod select;
mod validate;

pub use format::{option_labels, AnswerFormat, QuestionKind, QuestionRequirement};
pub use plan::{choose_category, plan_next, request_plan, CategoryPicker, EditDemand, GenerationPlan, PlanOutcome, Slot};
pub use run::{generate_dataset, record_id, GateHistogram, GenerationConfig, GenerationManifest, GenerationOutcome, QuestionerAgents};
pub use select::{select_image, SelectError, SelectorConfig};
pub use validate::{check_format, generate_question, validate, CandidateSample, Gates, GeneratedQuestion};

use thiserror::Error;

use crate::agents::AgentError;

#[derive(Debug, Error)]
pub enum QuestionerError {
    #[error("agent call failed: {0}")]
    Agent(#[from] AgentError),
    #[error("unparseable {role} output: {detail}")]
    Unparseable { role: &'static str, detail: String },
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Quota(#[from] crate::quota::QuotaError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("generation cancelled")]
    Cancelled,
}
