//! Diagnosis: sample a diagnostic set, score the model's answers, aggregate
//! per-category accuracy, attribute failures, and turn the result into the
//! next round's category mixture.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{extract_json_object, payload_prompt, AgentError, ChatClient, ChatMessage, ChatRequest};
use crate::capability::{
    extract_final_answer, CapabilityCategory, DatasetRecord, DiagnosticInstance, StepAssessment, Verdict,
};
use crate::store::{self, StoreError, SCHEMA_VERSION};
use crate::util::bounded_map;

pub const MAX_DIRECTIVE_CHARS: usize = 500;
pub const DEFAULT_HINT: &str = "maintain difficulty";
/// Failed triples shown to the analyst per category.
const MAX_ANALYST_EVIDENCE: usize = 20;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("diagnostic pool is empty")]
    EmptyPool,
    #[error("sample size must be at least 1")]
    ZeroSample,
    #[error("verdict references unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("all raw mixture weights are zero")]
    AllZeroWeights,
    #[error("invalid raw weight {weight} for {category}")]
    InvalidWeight { category: CapabilityCategory, weight: f64 },
    #[error("invalid weight bands: {0}")]
    InvalidBands(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Step function from accuracy to raw (unnormalized) weight.
///
/// `steps` holds `(upper_bound_exclusive, weight)` pairs in ascending bound
/// order; accuracies at or above the last bound get `top_weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightBands {
    pub steps: Vec<(f64, f64)>,
    pub top_weight: f64,
    pub undefined_weight: f64,
}

impl Default for WeightBands {
    fn default() -> Self {
        Self {
            steps: vec![(0.3, 4.0), (0.5, 3.0), (0.7, 2.0), (0.9, 1.0)],
            top_weight: 0.5,
            undefined_weight: 1.0,
        }
    }
}

impl WeightBands {
    pub fn validate(&self) -> Result<(), DiagnosisError> {
        let mut prev_bound = f64::NEG_INFINITY;
        let mut prev_weight = f64::INFINITY;
        for &(bound, weight) in &self.steps {
            if !(bound > prev_bound) {
                return Err(DiagnosisError::InvalidBands("bounds must be strictly ascending".into()));
            }
            if !(weight >= 0.0 && weight <= prev_weight) || !weight.is_finite() {
                return Err(DiagnosisError::InvalidBands("weights must be finite, non-negative and non-increasing".into()));
            }
            prev_bound = bound;
            prev_weight = weight;
        }
        if !(self.top_weight >= 0.0 && self.top_weight <= prev_weight) {
            return Err(DiagnosisError::InvalidBands("top weight must not exceed the last band".into()));
        }
        if !(self.undefined_weight >= 0.0 && self.undefined_weight.is_finite()) {
            return Err(DiagnosisError::InvalidBands("undefined weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn weight(&self, accuracy: Option<f64>) -> f64 {
        let Some(acc) = accuracy else {
            return self.undefined_weight;
        };
        self.steps
            .iter()
            .find(|(bound, _)| acc < *bound)
            .map(|(_, w)| *w)
            .unwrap_or(self.top_weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: CapabilityCategory,
    pub count: usize,
    /// `None` when no instance of the category was scored.
    pub accuracy: Option<f64>,
    pub error_ids: Vec<String>,
}

impl CategoryStats {
    pub fn correct(&self) -> usize {
        self.count - self.error_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailurePattern {
    pub category: CapabilityCategory,
    pub patterns: Vec<String>,
    pub evidence_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationHint {
    pub category: CapabilityCategory,
    pub directives: Vec<String>,
}

/// Normalized category proportions plus the raw weights they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureVector {
    weights: BTreeMap<CapabilityCategory, f64>,
    raw_weights: BTreeMap<CapabilityCategory, f64>,
}

impl MixtureVector {
    /// Normalize raw weights. Missing categories count as zero.
    pub fn from_raw(raw: BTreeMap<CapabilityCategory, f64>) -> Result<Self, DiagnosisError> {
        let mut full = BTreeMap::new();
        for c in CapabilityCategory::ALL {
            let w = raw.get(&c).copied().unwrap_or(0.0);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(DiagnosisError::InvalidWeight { category: c, weight: w });
            }
            full.insert(c, w);
        }
        let total: f64 = full.values().sum();
        if total <= 0.0 {
            return Err(DiagnosisError::AllZeroWeights);
        }
        let weights = full.iter().map(|(c, w)| (*c, w / total)).collect();
        Ok(Self { weights, raw_weights: full })
    }

    /// Equal weight on each of `active` (all twelve when empty).
    pub fn uniform(active: &[CapabilityCategory]) -> Self {
        let active = if active.is_empty() { &CapabilityCategory::ALL[..] } else { active };
        let raw = active.iter().map(|c| (*c, 1.0)).collect();
        Self::from_raw(raw).expect("uniform weights are positive")
    }

    pub fn weight(&self, c: CapabilityCategory) -> f64 {
        self.weights[&c]
    }

    pub fn raw_weight(&self, c: CapabilityCategory) -> f64 {
        self.raw_weights[&c]
    }

    pub fn weights(&self) -> &BTreeMap<CapabilityCategory, f64> {
        &self.weights
    }

    pub fn raw_weights(&self) -> &BTreeMap<CapabilityCategory, f64> {
        &self.raw_weights
    }

    /// Weights in canonical order.
    pub fn as_array(&self) -> [f64; CapabilityCategory::COUNT] {
        std::array::from_fn(|i| self.weights[&CapabilityCategory::ALL[i]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub schema_version: String,
    pub iteration: u32,
    pub sample_size: usize,
    pub mixture: BTreeMap<CapabilityCategory, f64>,
    pub raw_weights: BTreeMap<CapabilityCategory, f64>,
    pub stats: Vec<CategoryStats>,
    pub failures: Vec<FailurePattern>,
    pub hints: Vec<GenerationHint>,
    pub created_at: String,
}

impl DiagnosticReport {
    pub fn mixture_vector(&self) -> Result<MixtureVector, DiagnosisError> {
        MixtureVector::from_raw(self.raw_weights.clone())
    }

    pub fn stats_for(&self, c: CapabilityCategory) -> Option<&CategoryStats> {
        self.stats.iter().find(|s| s.category == c)
    }

    pub fn failures_for(&self, c: CapabilityCategory) -> &[String] {
        self.failures.iter().find(|f| f.category == c).map(|f| f.patterns.as_slice()).unwrap_or(&[])
    }

    pub fn hint_for(&self, c: CapabilityCategory) -> GenerationHint {
        self.hints
            .iter()
            .find(|h| h.category == c)
            .cloned()
            .unwrap_or_else(|| default_hint(c))
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        store::read_json(path)
    }
}

fn default_hint(category: CapabilityCategory) -> GenerationHint {
    GenerationHint { category, directives: vec![DEFAULT_HINT.to_string()] }
}

/// Draw `min(n, |pool|)` distinct instances uniformly, deterministically
/// under `seed`.
pub fn sample_diagnostic_set(
    pool: &[DatasetRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<DiagnosticInstance>, DiagnosisError> {
    if pool.is_empty() {
        return Err(DiagnosisError::EmptyPool);
    }
    if n == 0 {
        return Err(DiagnosisError::ZeroSample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), n.min(pool.len()));
    Ok(picked.into_iter().map(|i| pool[i].to_instance()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOutcome {
    Scored { verdict: Verdict, response: String },
    /// Transport failure; excluded from counts rather than scored 0.
    Unscored { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub id: String,
    pub outcome: ScoreOutcome,
}

impl ScoredInstance {
    pub fn verdict(&self) -> Option<&Verdict> {
        match &self.outcome {
            ScoreOutcome::Scored { verdict, .. } => Some(verdict),
            ScoreOutcome::Unscored { .. } => None,
        }
    }

    pub fn response(&self) -> Option<&str> {
        match &self.outcome {
            ScoreOutcome::Scored { response, .. } => Some(response),
            ScoreOutcome::Unscored { .. } => None,
        }
    }
}

const RESPONDER_SYSTEM: &str = "Answer the question about the image. Reason step by step, then give the final answer \
on the last line as `Answer: <answer>`.";

const VERIFIER_INSTRUCTION: &str = "You are a grading agent. Split the response into its reasoning steps, judge each \
step, and extract the final answer exactly as the response states it. Reply with a JSON object \
{\"final_answer\": string, \"steps\": [{\"step_index\": int, \"passed\": bool, \"note\": string}]}.";

const ANALYST_INSTRUCTION: &str = "You are a failure analyst. The model answered the following questions of one \
capability category incorrectly. Summarize the recurring error patterns in a few short phrases and give concrete \
instructions for generating training questions that target them (focus, difficulty, answer format). Reply with a \
JSON object {\"patterns\": [string], \"hints\": [string]}.";

pub fn responder_request(model: &str, instance: &DiagnosticInstance) -> ChatRequest {
    ChatRequest::new(
        model,
        vec![
            ChatMessage::system(RESPONDER_SYSTEM),
            ChatMessage::user(instance.question.clone()).with_image(instance.image.locator()),
        ],
    )
}

fn verifier_request(model: &str, instance: &DiagnosticInstance, response: &str) -> ChatRequest {
    let payload = json!({
        "id": instance.id,
        "response": response,
        "reference": instance.reference.text,
        "answer_kind": instance.reference.kind.as_str(),
    });
    ChatRequest::new(model, vec![ChatMessage::user(payload_prompt(VERIFIER_INSTRUCTION, &payload))])
}

fn parse_steps(v: &Value) -> Vec<StepAssessment> {
    v.get("steps")
        .and_then(Value::as_array)
        .map(|steps| steps.iter().filter_map(|s| serde_json::from_value(s.clone()).ok()).collect())
        .unwrap_or_default()
}

fn score_one(
    instance: &DiagnosticInstance,
    responder: &dyn ChatClient,
    verifier: &dyn ChatClient,
) -> Result<(Verdict, String), AgentError> {
    let response = responder.chat(&responder_request(responder.model(), instance))?.text;
    let reply = verifier.chat(&verifier_request(verifier.model(), instance, &response))?.text;
    // The verifier extracts; correctness is decided locally under the answer kind.
    let (final_answer, steps) = match extract_json_object(&reply) {
        Some(v) => (
            v.get("final_answer").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| extract_final_answer(&response)),
            parse_steps(&v),
        ),
        None => (extract_final_answer(&response), Vec::new()),
    };
    let correct = instance.reference.matches(&final_answer);
    Ok((Verdict::new(correct, steps), response))
}

/// One verdict per instance, in input order.
pub fn score_responses(
    instances: &[DiagnosticInstance],
    responder: &dyn ChatClient,
    verifier: &dyn ChatClient,
    concurrency: usize,
) -> Vec<ScoredInstance> {
    bounded_map(instances, concurrency, |_, inst| {
        let outcome = match score_one(inst, responder, verifier) {
            Ok((verdict, response)) => ScoreOutcome::Scored { verdict, response },
            Err(e) => {
                tracing::warn!(id = %inst.id, error = %e, "instance left unscored");
                ScoreOutcome::Unscored { reason: e.to_string() }
            }
        };
        ScoredInstance { id: inst.id.clone(), outcome }
    })
}

/// Per-category counts and accuracy, one entry per canonical category.
pub fn aggregate(
    verdicts: &[(String, Verdict)],
    instances: &[DiagnosticInstance],
) -> Result<Vec<CategoryStats>, DiagnosisError> {
    let category_of: HashMap<&str, CapabilityCategory> =
        instances.iter().map(|i| (i.id.as_str(), i.category)).collect();
    let mut counts = [0usize; CapabilityCategory::COUNT];
    let mut errors: Vec<Vec<String>> = vec![Vec::new(); CapabilityCategory::COUNT];
    for (id, verdict) in verdicts {
        let c = *category_of.get(id.as_str()).ok_or_else(|| DiagnosisError::UnknownInstance(id.clone()))?;
        counts[c.index()] += 1;
        if verdict.scalar() == 0 {
            errors[c.index()].push(id.clone());
        }
    }
    Ok(CapabilityCategory::ALL
        .iter()
        .zip(counts.iter().zip(errors))
        .map(|(&category, (&count, error_ids))| CategoryStats {
            category,
            count,
            accuracy: (count > 0).then(|| (count - error_ids.len()) as f64 / count as f64),
            error_ids,
        })
        .collect())
}

fn clip_directive(s: &str) -> Option<String> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    Some(t.chars().take(MAX_DIRECTIVE_CHARS).collect())
}

fn string_list(v: &Value, key: &str) -> Vec<String> {
    v.get(key)
        .and_then(Value::as_array)
        .map(|xs| xs.iter().filter_map(Value::as_str).filter_map(clip_directive).collect())
        .unwrap_or_default()
}

/// One pattern and one hint per category. Categories without errors get an
/// empty pattern and the default hint; analyst failures degrade the same
/// way with a warning instead of aborting.
pub fn attribute_failures(
    stats: &[CategoryStats],
    instances: &[DiagnosticInstance],
    scored: &[ScoredInstance],
    analyst: &dyn ChatClient,
) -> (Vec<FailurePattern>, Vec<GenerationHint>) {
    let by_id: HashMap<&str, &DiagnosticInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let responses: HashMap<&str, &str> =
        scored.iter().filter_map(|s| s.response().map(|r| (s.id.as_str(), r))).collect();
    let mut failures = Vec::new();
    let mut hints = Vec::new();
    for st in stats {
        let c = st.category;
        if st.error_ids.is_empty() {
            failures.push(FailurePattern { category: c, patterns: Vec::new(), evidence_ids: Vec::new() });
            hints.push(default_hint(c));
            continue;
        }
        let evidence: Vec<Value> = st
            .error_ids
            .iter()
            .take(MAX_ANALYST_EVIDENCE)
            .filter_map(|id| {
                let inst = by_id.get(id.as_str())?;
                Some(json!({
                    "id": id,
                    "question": inst.question,
                    "response": responses.get(id.as_str()).copied().unwrap_or(""),
                    "reference": inst.reference.text,
                }))
            })
            .collect();
        let payload = json!({"category": c.id(), "category_name": c.display_name(), "failures": evidence});
        let req = ChatRequest::new(analyst.model(), vec![ChatMessage::user(payload_prompt(ANALYST_INSTRUCTION, &payload))]);
        let (patterns, directives) = match analyst.chat(&req) {
            Ok(resp) => match extract_json_object(&resp.text) {
                Some(v) => (string_list(&v, "patterns"), string_list(&v, "hints")),
                None => (clip_directive(&resp.text).into_iter().collect(), Vec::new()),
            },
            Err(e) => {
                tracing::warn!(category = %c, error = %e, "failure attribution unavailable");
                (Vec::new(), Vec::new())
            }
        };
        let directives = if directives.is_empty() {
            patterns
                .iter()
                .filter_map(|p| clip_directive(&format!("target this weakness: {p}")))
                .chain(std::iter::once(DEFAULT_HINT.to_string()))
                .take(4)
                .collect()
        } else {
            directives
        };
        let evidence_ids = if patterns.is_empty() { Vec::new() } else { st.error_ids.clone() };
        failures.push(FailurePattern { category: c, patterns, evidence_ids });
        hints.push(GenerationHint { category: c, directives });
    }
    (failures, hints)
}

/// Band lookup on every category's accuracy, then normalization.
pub fn accuracy_to_mixture(stats: &[CategoryStats], bands: &WeightBands) -> Result<MixtureVector, DiagnosisError> {
    accuracy_to_mixture_over(stats, bands, &CapabilityCategory::ALL)
}

/// As [`accuracy_to_mixture`] but categories outside `active` get weight 0.
pub fn accuracy_to_mixture_over(
    stats: &[CategoryStats],
    bands: &WeightBands,
    active: &[CapabilityCategory],
) -> Result<MixtureVector, DiagnosisError> {
    bands.validate()?;
    let raw = CapabilityCategory::ALL
        .iter()
        .map(|&c| {
            let w = if active.contains(&c) {
                bands.weight(stats.iter().find(|s| s.category == c).and_then(|s| s.accuracy))
            } else {
                0.0
            };
            (c, w)
        })
        .collect();
    MixtureVector::from_raw(raw)
}

#[derive(Debug, Clone)]
pub struct DiagnoseConfig {
    pub iteration: u32,
    pub sample_size: usize,
    pub seed: u64,
    pub bands: WeightBands,
    pub active: Vec<CapabilityCategory>,
    pub concurrency: usize,
    pub created_at: String,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            iteration: 0,
            sample_size: 200,
            seed: 0,
            bands: WeightBands::default(),
            active: CapabilityCategory::ALL.to_vec(),
            concurrency: 8,
            created_at: "1970-01-01T00:00:00Z".into(),
        }
    }
}

pub struct DiagnosisAgents<'a> {
    pub model: &'a dyn ChatClient,
    pub verifier: &'a dyn ChatClient,
    pub analyst: &'a dyn ChatClient,
}

/// sample → score → aggregate → attribute → mixture.
pub fn diagnose(
    agents: &DiagnosisAgents<'_>,
    pool: &[DatasetRecord],
    config: &DiagnoseConfig,
) -> Result<DiagnosticReport, DiagnosisError> {
    let instances = sample_diagnostic_set(pool, config.sample_size, config.seed)?;
    let scored = score_responses(&instances, agents.model, agents.verifier, config.concurrency);
    let verdicts: Vec<(String, Verdict)> =
        scored.iter().filter_map(|s| s.verdict().map(|v| (s.id.clone(), v.clone()))).collect();
    let stats = aggregate(&verdicts, &instances)?;
    let (failures, hints) = attribute_failures(&stats, &instances, &scored, agents.analyst);
    let mixture = accuracy_to_mixture_over(&stats, &config.bands, &config.active)?;
    Ok(DiagnosticReport {
        schema_version: SCHEMA_VERSION.to_string(),
        iteration: config.iteration,
        sample_size: stats.iter().map(|s| s.count).sum(),
        mixture: mixture.weights().clone(),
        raw_weights: mixture.raw_weights().clone(),
        stats,
        failures,
        hints,
        created_at: config.created_at.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{read_payload, MockChatClient};
    use crate::capability::{AnswerKey, AnswerKind, ImageAsset, ImageSource, NumericTolerance, Provenance};

    fn instance(id: &str, c: CapabilityCategory, answer: &str, kind: AnswerKind) -> DiagnosticInstance {
        DiagnosticInstance {
            id: id.into(),
            image: ImageAsset::new(ImageSource::LocalPath, format!("{id}.png"), Provenance::Seed).unwrap(),
            question: format!("question {id}"),
            reference: AnswerKey::new(answer, kind),
            category: c,
        }
    }

    fn record(i: usize, c: CapabilityCategory) -> DatasetRecord {
        DatasetRecord {
            id: format!("p{i:05}"),
            image: ImageAsset::new(ImageSource::LocalPath, format!("img/{i}.png"), Provenance::Seed).unwrap(),
            question: format!("q{i}"),
            answer: "A".into(),
            answer_kind: AnswerKind::Choice,
            category: c,
            meta: Default::default(),
        }
    }

    fn stats_with(acc: &[(CapabilityCategory, Option<f64>)]) -> Vec<CategoryStats> {
        CapabilityCategory::ALL
            .iter()
            .map(|&c| {
                let a = acc.iter().find(|(x, _)| *x == c).and_then(|(_, a)| *a);
                CategoryStats { category: c, count: usize::from(a.is_some()) * 10, accuracy: a, error_ids: vec![] }
            })
            .collect()
    }

    /// Responder echoes the reference; verifier passes final answer through.
    fn echo_agents() -> (MockChatClient, MockChatClient) {
        let model = MockChatClient::new("model", 0).with_responder(|c| Ok(format!("thinking\nAnswer: {}", c.prompt())));
        let verifier = MockChatClient::new("verifier", 0).with_responder(|c| {
            let p = read_payload(c.prompt()).unwrap();
            Ok(json!({"final_answer": extract_final_answer(p["response"].as_str().unwrap()), "steps": [{"step_index": 1, "passed": true, "note": ""}]}).to_string())
        });
        (model, verifier)
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let pool: Vec<_> = (0..47_000).map(|i| record(i, CapabilityCategory::ALL[i % 12])).collect();
        let a = sample_diagnostic_set(&pool, 200, 7).unwrap();
        let b = sample_diagnostic_set(&pool, 200, 7).unwrap();
        assert_eq!(a.len(), 200);
        let ids: std::collections::HashSet<_> = a.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), 200);
        assert_eq!(a.iter().map(|i| &i.id).collect::<Vec<_>>(), b.iter().map(|i| &i.id).collect::<Vec<_>>());
        assert_eq!(sample_diagnostic_set(&pool[..5], 200, 7).unwrap().len(), 5);
        assert!(matches!(sample_diagnostic_set(&[], 10, 7), Err(DiagnosisError::EmptyPool)));
    }

    #[test]
    fn scores_exact_and_numeric() {
        let (model, verifier) = echo_agents();
        let mut inst = vec![
            instance("a", CapabilityCategory::Others, "42", AnswerKind::Exact),
            instance("b", CapabilityCategory::Others, "3.14159", AnswerKind::Numeric),
        ];
        inst[0].question = "42".into();
        inst[1].question = "3.1416".into();
        inst[1].reference = inst[1].reference.clone().with_tolerance(NumericTolerance::relative(1e-3));
        let scored = score_responses(&inst, &model, &verifier, 2);
        assert!(scored.iter().all(|s| s.verdict().unwrap().scalar() == 1));
        assert_eq!(scored[0].verdict().unwrap().step_assessments.len(), 1);
    }

    #[test]
    fn every_third_marked_wrong_gives_eight_of_twelve() {
        let model = MockChatClient::constant("model", "Answer: A");
        let verifier = MockChatClient::new("verifier", 0).with_responder(|c| {
            let p = read_payload(c.prompt()).unwrap();
            let n: usize = p["id"].as_str().unwrap()[1..].parse().unwrap();
            let fa = if (n + 1) % 3 == 0 { "Z" } else { "A" };
            Ok(json!({"final_answer": fa}).to_string())
        });
        let inst: Vec<_> = (0..12).map(|i| instance(&format!("i{i}"), CapabilityCategory::Others, "A", AnswerKind::Choice)).collect();
        let scored = score_responses(&inst, &model, &verifier, 4);
        let ones = scored.iter().filter(|s| s.verdict().unwrap().scalar() == 1).count();
        assert_eq!(ones, 8);
    }

    #[test]
    fn transport_failures_are_unscored_not_wrong() {
        let model = MockChatClient::new("model", 0)
            .with_responder(|_| Err(AgentError::Transport { message: "down".into(), retriable: true }));
        let (_, verifier) = echo_agents();
        let inst = vec![instance("a", CapabilityCategory::Others, "1", AnswerKind::Exact)];
        let scored = score_responses(&inst, &model, &verifier, 1);
        assert!(matches!(scored[0].outcome, ScoreOutcome::Unscored { .. }));
    }

    #[test]
    fn aggregate_chart_example() {
        let c = CapabilityCategory::StatisticalCharts;
        let inst: Vec<_> = (0..4).map(|i| instance(&format!("c{i}"), c, "1", AnswerKind::Exact)).collect();
        let verdicts: Vec<_> =
            [1, 1, 0, 1].iter().enumerate().map(|(i, &s)| (format!("c{i}"), Verdict::new(s == 1, vec![]))).collect();
        let stats = aggregate(&verdicts, &inst).unwrap();
        assert_eq!(stats.len(), 12);
        let chart = &stats[c.index()];
        assert_eq!(chart.count, 4);
        assert_eq!(chart.accuracy, Some(0.75));
        assert_eq!(chart.error_ids, vec!["c2".to_string()]);
        assert_eq!(chart.correct(), 3);
        let empty = &stats[CapabilityCategory::Artworks.index()];
        assert_eq!((empty.count, empty.accuracy), (0, None));
        let bad = vec![("zz".to_string(), Verdict::new(true, vec![]))];
        assert!(matches!(aggregate(&bad, &inst), Err(DiagnosisError::UnknownInstance(_))));
    }

    #[test]
    fn normalization_arithmetic() {
        use CapabilityCategory::*;
        let raw = [(GeometryImages, 2.0), (MedicalImages, 1.0), (StatisticalCharts, 1.0)].into();
        let m = MixtureVector::from_raw(raw).unwrap();
        assert_eq!(m.weight(GeometryImages), 0.5);
        assert_eq!(m.weight(MedicalImages), 0.25);
        assert_eq!(m.weight(StatisticalCharts), 0.25);
        assert_eq!(m.weight(Others), 0.0);
        assert!(matches!(MixtureVector::from_raw(BTreeMap::new()), Err(DiagnosisError::AllZeroWeights)));
    }

    #[test]
    fn identical_accuracy_gives_uniform_mixture() {
        let stats = stats_with(&CapabilityCategory::ALL.map(|c| (c, Some(0.6))));
        let m = accuracy_to_mixture(&stats, &WeightBands::default()).unwrap();
        for c in CapabilityCategory::ALL {
            assert!((m.weight(c) - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weakest_of_two_gets_largest_share() {
        use CapabilityCategory::*;
        let stats = stats_with(&[(GeometryImages, Some(0.2)), (MedicalImages, Some(0.8))]);
        let m = accuracy_to_mixture(&stats, &WeightBands::default()).unwrap();
        // raw: 4.0, 1.0 and ten undefined categories at 1.0 => total 15.
        assert!((m.weight(GeometryImages) - 4.0 / 15.0).abs() < 1e-15);
        for c in CapabilityCategory::ALL.into_iter().filter(|&c| c != GeometryImages) {
            assert!(m.weight(GeometryImages) > m.weight(c));
        }
    }

    #[test]
    fn default_band_table() {
        let b = WeightBands::default();
        b.validate().unwrap();
        for (acc, w) in [(0.0, 4.0), (0.29, 4.0), (0.3, 3.0), (0.5, 2.0), (0.7, 1.0), (0.89, 1.0), (0.9, 0.5), (1.0, 0.5)] {
            assert_eq!(b.weight(Some(acc)), w, "acc {acc}");
        }
        assert_eq!(b.weight(None), 1.0);
        let bad = WeightBands { steps: vec![(0.5, 1.0), (0.7, 2.0)], ..WeightBands::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attribution_passthrough_and_defaults() {
        let c = CapabilityCategory::StatisticalCharts;
        let inst = vec![instance("x", c, "1", AnswerKind::Exact), instance("y", CapabilityCategory::Artworks, "1", AnswerKind::Exact)];
        let verdicts = vec![("x".to_string(), Verdict::new(false, vec![])), ("y".to_string(), Verdict::new(true, vec![]))];
        let stats = aggregate(&verdicts, &inst).unwrap();
        let analyst = MockChatClient::constant("analyst", "ignored axis units/legend mismatch");
        let (f, h) = attribute_failures(&stats, &inst, &[], &analyst);
        assert_eq!(f.len(), 12);
        assert_eq!(f[c.index()].patterns, vec!["ignored axis units/legend mismatch".to_string()]);
        assert_eq!(f[c.index()].evidence_ids, vec!["x".to_string()]);
        assert!(f[CapabilityCategory::Artworks.index()].patterns.is_empty());
        assert_eq!(h[CapabilityCategory::Artworks.index()].directives, vec![DEFAULT_HINT.to_string()]);
        assert!(h.iter().flat_map(|h| &h.directives).all(|d| !d.is_empty() && d.chars().count() <= MAX_DIRECTIVE_CHARS));

        let down = MockChatClient::new("analyst", 0)
            .with_responder(|_| Err(AgentError::Transport { message: "x".into(), retriable: true }));
        let (f, h) = attribute_failures(&stats, &inst, &[], &down);
        assert!(f[c.index()].patterns.is_empty());
        assert_eq!(h[c.index()].directives, vec![DEFAULT_HINT.to_string()]);
    }

    #[test]
    fn all_correct_model_yields_uniform_report() {
        let pool: Vec<_> = (0..240).map(|i| record(i, CapabilityCategory::ALL[i % 12])).collect();
        let model = MockChatClient::constant("model", "Answer: A");
        let (_, verifier) = echo_agents();
        let analyst = MockChatClient::constant("analyst", "{\"patterns\": [\"x\"]}");
        let agents = DiagnosisAgents { model: &model, verifier: &verifier, analyst: &analyst };
        let report = diagnose(&agents, &pool, &DiagnoseConfig { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(report.sample_size, 200);
        assert!(report.failures.iter().all(|f| f.patterns.is_empty()));
        for c in CapabilityCategory::ALL {
            assert!((report.mixture[&c] - 1.0 / 12.0).abs() < 1e-12);
        }
        let again = diagnose(&agents, &pool, &DiagnoseConfig { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn failing_one_category_raises_its_share() {
        let pool: Vec<_> = (0..240).map(|i| record(i, CapabilityCategory::ALL[i % 12])).collect();
        let charts: std::collections::HashSet<String> = pool
            .iter()
            .filter(|r| r.category == CapabilityCategory::StatisticalCharts)
            .map(|r| r.question.clone())
            .collect();
        let model = MockChatClient::new("model", 0).with_responder(move |c| {
            Ok(if charts.contains(c.prompt()) { "Answer: D" } else { "Answer: A" }.to_string())
        });
        let (_, verifier) = echo_agents();
        let analyst = MockChatClient::constant("analyst", "{\"patterns\": [\"legend mismatch\"], \"hints\": [\"use legends\"]}");
        let agents = DiagnosisAgents { model: &model, verifier: &verifier, analyst: &analyst };
        let report = diagnose(&agents, &pool, &DiagnoseConfig::default()).unwrap();
        let a = report.mixture[&CapabilityCategory::StatisticalCharts];
        for c in CapabilityCategory::ALL.into_iter().filter(|&c| c != CapabilityCategory::StatisticalCharts) {
            assert!(a > report.mixture[&c]);
        }
        assert_eq!(report.failures_for(CapabilityCategory::StatisticalCharts), ["legend mismatch".to_string()]);
        let json: Value = serde_json::to_value(&report).unwrap();
        assert!(json["stats"][0]["accuracy"].is_number());
        assert!(json["mixture"]["statistical-charts"].is_number());
    }
}
