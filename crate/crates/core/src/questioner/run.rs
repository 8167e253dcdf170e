use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::plan::{request_plan, CategoryPicker, Slot};
use super::select::{select_image, SelectorConfig};
use super::validate::{generate_question, validate, CandidateSample};
use super::QuestionerError;
use crate::agents::{ChatClient, ImageEditClient, ImageSearchClient};
use crate::capability::{CapabilityCategory, DatasetRecord};
use crate::diagnosis::{DiagnosticReport, MixtureVector};
use crate::quota::{allocate, LedgerSnapshot};
use crate::store::{self, JsonlAppender, StoreError, SCHEMA_VERSION};
use crate::util::digest_hex;

pub struct QuestionerAgents<'a> {
    pub planner: &'a dyn ChatClient,
    /// Structure classifier for image filtering; `None` skips that check.
    pub classifier: Option<&'a dyn ChatClient>,
    pub generator: &'a dyn ChatClient,
    pub validator: &'a dyn ChatClient,
    pub search: &'a dyn ImageSearchClient,
    pub editor: &'a dyn ImageEditClient,
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub iteration: u32,
    pub seed: u64,
    /// Extra attempts per quota slot before the slot counts as shortfall.
    pub retry_budget: u32,
    pub concurrency: usize,
    pub parse_retries: u32,
    pub selector: SelectorConfig,
    pub progress_every: usize,
    /// Accepted samples are appended here as they arrive.
    pub stream_path: Option<PathBuf>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            iteration: 0,
            seed: 0,
            retry_budget: 5,
            concurrency: 8,
            parse_retries: 2,
            selector: SelectorConfig::default(),
            progress_every: 50,
            stream_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateHistogram {
    pub cat: u64,
    pub sol: u64,
    pub ver: u64,
    pub fmt: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub schema_version: String,
    pub iteration: u32,
    pub budget: u64,
    pub mixture: BTreeMap<CapabilityCategory, f64>,
    pub targets: BTreeMap<CapabilityCategory, u64>,
    pub accepted: u64,
    /// Attempts that did not yield an accepted sample.
    pub rejected: u64,
    pub gate_rejected: u64,
    pub unvalidated: u64,
    pub abandoned: u64,
    pub duplicates: u64,
    pub attempts: BTreeMap<CapabilityCategory, u64>,
    /// Only categories that fell short.
    pub shortfall: BTreeMap<CapabilityCategory, u64>,
    pub gate_reject_histogram: GateHistogram,
    pub cancelled: bool,
}

impl GenerationManifest {
    pub fn is_saturated(&self) -> bool {
        self.shortfall.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    /// Accepted samples in canonical category order, then attempt ordinal.
    pub records: Vec<DatasetRecord>,
    pub manifest: GenerationManifest,
    pub ledger: LedgerSnapshot,
}

impl GenerationOutcome {
    pub fn write(&self, dataset: &Path, manifest: &Path, ledger: &Path) -> Result<(), StoreError> {
        store::write_jsonl(dataset, &self.records)?;
        store::write_json(manifest, &self.manifest)?;
        store::write_json(ledger, &self.ledger)
    }
}

pub fn record_id(iteration: u32, category: CapabilityCategory, ordinal: u64) -> String {
    format!("k{iteration}-{}-{ordinal:05}", category.id())
}

fn to_record(iteration: u32, c: &CandidateSample) -> DatasetRecord {
    let gates = c.gates.expect("accepted candidates are validated");
    let mut meta = serde_json::Map::new();
    meta.insert("iteration".into(), json!(iteration));
    meta.insert("sample_index".into(), json!(c.plan.sample_index));
    meta.insert("image_req".into(), json!(c.plan.image_req));
    meta.insert("question_kind".into(), json!(c.plan.question_req.kind.as_str()));
    meta.insert("direction".into(), json!(c.plan.direction));
    meta.insert("gates".into(), gates.as_json());
    if !c.image.parents().is_empty() {
        meta.insert("parents".into(), json!(c.image.parents()));
    }
    DatasetRecord {
        id: record_id(iteration, c.category, c.plan.sample_index),
        image: c.image.clone(),
        question: c.question.clone(),
        answer: c.answer.clone(),
        answer_kind: c.answer_kind,
        category: c.category,
        meta,
    }
}

enum Attempt {
    Candidate(CandidateSample),
    Abandoned(QuestionerError),
}

fn attempt(
    report: &DiagnosticReport,
    slot: &Slot,
    agents: &QuestionerAgents<'_>,
    config: &GenerationConfig,
) -> Attempt {
    let run = || -> Result<CandidateSample, QuestionerError> {
        let plan = request_plan(report, slot, agents.planner)?;
        let image = select_image(&plan, agents.search, agents.editor, agents.classifier, &config.selector)?;
        let hints = report.hint_for(slot.category);
        let generated = generate_question(&image, &plan, &hints, agents.generator, config.parse_retries)?;
        Ok(validate(CandidateSample::new(plan, image, generated), agents.validator))
    };
    match run() {
        Ok(c) => Attempt::Candidate(c),
        Err(e) => Attempt::Abandoned(e),
    }
}

#[derive(Default)]
struct Tally {
    accepted: Vec<CandidateSample>,
    seen_questions: HashSet<String>,
    histogram: GateHistogram,
    gate_rejected: u64,
    unvalidated: u64,
    abandoned: u64,
    duplicates: u64,
    stream: Option<JsonlAppender>,
    stream_error: Option<StoreError>,
}

/// Run planner, selector, generator and validator until every quota is met
/// or every category has used its attempts.
///
/// Workers share one [`CategoryPicker`]; the ledger is the only
/// synchronization point for quota accounting. Rejected and abandoned
/// attempts release their slot. A set `cancel` flag stops new attempts;
/// the outcome then reports `cancelled`.
pub fn generate_dataset(
    report: &DiagnosticReport,
    mixture: &MixtureVector,
    budget: u64,
    agents: &QuestionerAgents<'_>,
    config: &GenerationConfig,
    progress: &(dyn Fn(u64, u64) + Sync),
    cancel: Option<&AtomicBool>,
) -> Result<GenerationOutcome, QuestionerError> {
    let ledger = allocate(mixture, budget)?;
    let picker = CategoryPicker::new(&ledger, config.retry_budget, config.seed ^ u64::from(config.iteration));
    let stream = config.stream_path.as_deref().map(JsonlAppender::create).transpose()?;
    let tally = Mutex::new(Tally { stream, ..Tally::default() });
    let cancelled = AtomicBool::new(false);
    let first_error: Mutex<Option<QuestionerError>> = Mutex::new(None);

    let worker = || {
        loop {
            if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
                cancelled.store(true, Ordering::SeqCst);
                return;
            }
            let Some(slot) = picker.next_slot() else { return };
            let outcome = attempt(report, &slot, agents, config);
            let mut t = tally.lock().unwrap_or_else(|e| e.into_inner());
            let settled = match outcome {
                Attempt::Abandoned(e) => {
                    tracing::debug!(category = %slot.category, ordinal = slot.ordinal, error = %e, "attempt abandoned");
                    t.abandoned += 1;
                    ledger.release(&slot.token)
                }
                Attempt::Candidate(c) => match c.gates {
                    None => {
                        t.unvalidated += 1;
                        ledger.release(&slot.token)
                    }
                    Some(g) if !g.accepted() => {
                        t.gate_rejected += 1;
                        t.histogram.cat += u64::from(!g.cat);
                        t.histogram.sol += u64::from(!g.sol);
                        t.histogram.ver += u64::from(!g.ver);
                        t.histogram.fmt += u64::from(!g.fmt);
                        ledger.release(&slot.token)
                    }
                    Some(_) => {
                        let key = digest_hex(c.question.trim().as_bytes());
                        if !t.seen_questions.insert(key) {
                            t.duplicates += 1;
                            ledger.release(&slot.token)
                        } else {
                            let rec = to_record(config.iteration, &c);
                            if let Some(s) = t.stream.as_mut() {
                                if let Err(e) = s.push(&rec) {
                                    t.stream_error.get_or_insert(e);
                                }
                            }
                            t.accepted.push(c);
                            let n = t.accepted.len() as u64;
                            if config.progress_every > 0 && n.is_multiple_of(config.progress_every as u64) {
                                progress(n, budget);
                            }
                            ledger.commit(&slot.token)
                        }
                    }
                },
            };
            if let Err(e) = settled {
                first_error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e.into());
                return;
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 0..config.concurrency.max(1) {
            s.spawn(worker);
        }
    });
    if let Some(e) = first_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }

    let mut t = tally.into_inner().unwrap_or_else(|e| e.into_inner());
    if let Some(e) = t.stream_error.take() {
        return Err(e.into());
    }
    t.accepted.sort_by_key(|c| (c.category, c.plan.sample_index));
    let records: Vec<DatasetRecord> = t.accepted.iter().map(|c| to_record(config.iteration, c)).collect();
    let snapshot = ledger.snapshot();
    let issued = picker.issued();
    let attempts_total: u64 = issued.iter().sum();
    let manifest = GenerationManifest {
        schema_version: SCHEMA_VERSION.to_string(),
        iteration: config.iteration,
        budget,
        mixture: mixture.weights().clone(),
        targets: snapshot.categories.iter().map(|(c, q)| (*c, q.target)).collect(),
        accepted: records.len() as u64,
        rejected: attempts_total - records.len() as u64,
        gate_rejected: t.gate_rejected,
        unvalidated: t.unvalidated,
        abandoned: t.abandoned,
        duplicates: t.duplicates,
        attempts: CapabilityCategory::ALL.iter().map(|&c| (c, issued[c.index()])).collect(),
        shortfall: snapshot
            .categories
            .iter()
            .filter(|(_, q)| q.committed < q.target)
            .map(|(c, q)| (*c, q.target - q.committed))
            .collect(),
        gate_reject_histogram: t.histogram,
        cancelled: cancelled.load(Ordering::SeqCst),
    };
    Ok(GenerationOutcome { records, manifest, ledger: snapshot })
}
