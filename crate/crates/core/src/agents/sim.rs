//! Scripted agents over a [`SyntheticWorld`].
//!
//! Every role is a [`MockChatClient`] whose replies are pure functions of
//! the request payload, the run seed and the world state, so a pipeline
//! built from these agents is reproducible under any worker count. The
//! responder answers a category-c question correctly with probability
//! `s_c`; the generator can inject malformed candidates on a fixed schedule
//! so gate behaviour is checkable.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use serde_json::{json, Value};

use super::{
    read_payload, AgentError, ChatClient, MockCall, MockChatClient, MockEditClient, MockEmbedder, MockSearchClient,
    SearchHit, SearchQuery, SyntheticWorld, WorldConfig,
};
use crate::capability::{
    extract_final_answer, AnswerKind, CapabilityCategory, DatasetRecord, ImageAsset, ImageSource, Provenance,
};
use crate::learnability::RolloutPolicy;
use crate::util::{stable_hash, unit_interval};

pub type SharedWorld = Arc<RwLock<SyntheticWorld>>;

pub fn shared(world: SyntheticWorld) -> SharedWorld {
    Arc::new(RwLock::new(world))
}

/// Marker the sim validator reads as "not answerable from the image".
pub const UNANSWERABLE_MARKER: &str = "[info: incomplete]";
/// Marker the sim validator reads as "wrong category".
pub const OFF_TOPIC_MARKER: &str = "[topic: other]";

/// Question text → (category, reference answer, kind). Filled by the seed
/// pool, by the sim generator, and by callers loading records from disk.
#[derive(Clone, Default)]
pub struct SimOracle {
    inner: Arc<Mutex<HashMap<String, (CapabilityCategory, String, AnswerKind)>>>,
}

impl SimOracle {
    pub fn register(&self, question: &str, category: CapabilityCategory, answer: &str, kind: AnswerKind) {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(question.trim().to_string(), (category, answer.to_string(), kind));
    }

    pub fn register_records(&self, records: &[DatasetRecord]) {
        for r in records {
            self.register(&r.question, r.category, &r.answer, r.answer_kind);
        }
    }

    pub fn lookup(&self, question: &str) -> Option<(CapabilityCategory, String, AnswerKind)> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).get(question.trim()).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    /// A choice question that lists no options; trips the format gate.
    MissingOptions,
    /// Trips the solvability gate.
    Unanswerable,
    /// Trips the category gate.
    WrongCategory,
}

/// The generator's injection schedule. Depends only on the seed, the
/// category and the attempt ordinal.
pub fn injected_fault(seed: u64, category: CapabilityCategory, ordinal: u64, rate: f64) -> Option<InjectedFault> {
    let (s, o) = (seed.to_string(), ordinal.to_string());
    if unit_interval(&["fault", &s, category.id(), &o]) >= rate {
        return None;
    }
    Some(match stable_hash(&["fault-kind", &s, category.id(), &o]) % 3 {
        0 => InjectedFault::MissingOptions,
        1 => InjectedFault::Unanswerable,
        _ => InjectedFault::WrongCategory,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    /// Share of generator outputs that are deliberately malformed.
    pub malformed_rate: f64,
    /// Share of plans asking for a crop or a stitch.
    pub edit_rate: f64,
    pub judges: usize,
    pub embedding_dim: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { seed: 0, malformed_rate: 0.0, edit_rate: 0.15, judges: 3, embedding_dim: 64 }
    }
}

/// Subject matter per category: (image requirement, typical failure,
/// short-text answers).
fn profile(c: CapabilityCategory) -> (&'static str, &'static str, [&'static str; 4]) {
    use CapabilityCategory::*;
    match c {
        GeometryImages => ("triangle with labeled angles and side lengths", "confuses adjacent and opposite sides", ["isosceles", "right angle", "parallel", "tangent"]),
        MedicalImages => ("chest x-ray with annotated region", "misses the annotated region", ["left lung", "fracture", "no finding", "enlarged heart"]),
        StatisticalCharts => ("bar chart with legend and labeled axes", "ignored axis units/legend mismatch", ["north", "2019", "product b", "decreasing"]),
        TextIntensiveImages => ("scanned receipt with small printed text", "drops characters in small print", ["total", "cash", "invoice", "tuesday"]),
        FlowDiagrams => ("process flowchart with decision nodes", "follows the wrong branch at decisions", ["approve", "retry", "end", "review"]),
        MathematicalFormulas => ("handwritten integral with limits", "misreads exponents and limits", ["converges", "zero", "pi", "undefined"]),
        SpatialMaps => ("street map with scale bar and compass", "ignores the scale bar", ["north east", "river", "station", "park"]),
        NaturalScenes => ("outdoor scene with several people and vehicles", "miscounts partially occluded objects", ["bicycle", "beach", "evening", "three dogs"]),
        DailyObjects => ("kitchen counter with labeled products", "confuses similar-looking objects", ["kettle", "blue mug", "scissors", "toaster"]),
        Artworks => ("oil painting with visible signature", "misattributes style and period", ["baroque", "portrait", "still life", "cubism"]),
        ArchitecturalImages => ("building facade with floor plan inset", "miscounts floors and openings", ["gothic", "arch", "four floors", "dome"]),
        Others => ("miscellaneous infographic with icons", "overlooks small icons", ["warning", "recycle", "wifi", "battery"]),
    }
}

fn kind_for(seed: u64, c: CapabilityCategory, index: u64) -> (AnswerKind, bool) {
    let h = stable_hash(&["kind", &seed.to_string(), c.id(), &index.to_string()]);
    let kind = match h % 3 {
        0 => AnswerKind::Choice,
        1 => AnswerKind::Numeric,
        _ => AnswerKind::Exact,
    };
    (kind, (h >> 8).is_multiple_of(2))
}

/// Question text and reference for one synthetic item.
fn synth_item(key: &[&str], c: CapabilityCategory, kind: AnswerKind, unit: bool) -> (String, String) {
    let h = stable_hash(key);
    let subject = profile(c).0;
    match kind {
        AnswerKind::Choice => {
            let base = 2 + h % 40;
            let letter = ["A", "B", "C", "D"][(h >> 7) as usize % 4];
            let options: Vec<String> =
                ["A", "B", "C", "D"].iter().enumerate().map(|(i, l)| format!("({l}) {}", base + 3 * i as u64)).collect();
            (format!("In the {subject}, which value is marked? {}", options.join(" ")), letter.to_string())
        }
        AnswerKind::Numeric => {
            let v = 1 + h % 97;
            let answer = if unit { format!("{v} cm") } else { v.to_string() };
            (format!("In the {subject}, what is the measured quantity?"), answer)
        }
        AnswerKind::Exact => {
            let word = profile(c).2[(h >> 5) as usize % 4];
            (format!("In the {subject}, which term describes the highlighted part?"), word.to_string())
        }
    }
}

/// A labelled diagnostic pool spread evenly over the world's categories.
pub fn seed_pool(config: &WorldConfig, seed: u64) -> Vec<DatasetRecord> {
    let cats = config.active_categories();
    (0..config.pool_size)
        .map(|i| {
            let c = cats[i % cats.len()];
            let (kind, unit) = kind_for(seed, c, i as u64);
            let key = ["pool", &seed.to_string(), &i.to_string()];
            let (q, answer) = synth_item(&key, c, kind, unit);
            let locator = format!("sim://{}/pool-{i:05}.png", c.id());
            DatasetRecord {
                id: format!("pool-{i:05}"),
                image: ImageAsset::new(ImageSource::RemoteUrl, locator, Provenance::Seed)
                    .expect("non-empty locator")
                    .with_dimensions(640, 480),
                question: format!("{q} (item {i})"),
                answer,
                answer_kind: kind,
                category: c,
                meta: Default::default(),
            }
        })
        .collect()
}

fn wrong_answer(answer: &str, kind: AnswerKind) -> String {
    match kind {
        AnswerKind::Choice => match answer.trim() {
            "A" => "B".into(),
            "B" => "C".into(),
            "C" => "D".into(),
            _ => "A".into(),
        },
        AnswerKind::Numeric => {
            let (v, unit) = crate::capability::parse_number_with_unit(answer).unwrap_or((0.0, None));
            match unit {
                Some(u) => format!("{} {u}", v + 7.0),
                None => format!("{}", v + 7.0),
            }
        }
        AnswerKind::Exact => "cannot tell".into(),
    }
}

/// Correct with probability `s_c`; the draw depends on the seed, the world
/// version, the item and the rollout index.
fn world_answer(world: &SyntheticWorld, seed: u64, category: CapabilityCategory, key: &str, rollout: usize, answer: &str, kind: AnswerKind) -> String {
    let u = unit_interval(&["answer", &seed.to_string(), &world.version.to_string(), key, &rollout.to_string()]);
    let given = if u < world.skill(category) { answer.to_string() } else { wrong_answer(answer, kind) };
    format!("Looking at the image step by step.\nAnswer: {given}")
}

fn payload(call: &MockCall<'_>) -> Result<Value, AgentError> {
    read_payload(call.prompt()).ok_or_else(|| AgentError::Malformed(format!("{} prompt has no payload", call.role)))
}

fn category_of(v: &Value) -> CapabilityCategory {
    v.get("category")
        .and_then(Value::as_str)
        .and_then(|s| crate::capability::parse_category(s).ok())
        .unwrap_or(CapabilityCategory::Others)
}

/// Every role of the loop, backed by one world and one oracle.
pub struct SimAgents {
    pub world: SharedWorld,
    pub oracle: SimOracle,
    pub config: SimConfig,
    pub responder: MockChatClient,
    pub verifier: MockChatClient,
    pub analyst: MockChatClient,
    pub planner: MockChatClient,
    pub classifier: MockChatClient,
    pub generator: MockChatClient,
    pub validator: MockChatClient,
    pub judges: Vec<MockChatClient>,
    pub search: MockSearchClient,
    pub editor: MockEditClient,
    pub embedder: MockEmbedder,
}

impl SimAgents {
    pub fn new(world: SharedWorld, config: SimConfig) -> Self {
        let oracle = SimOracle::default();
        let seed = config.seed;

        let (w, o) = (world.clone(), oracle.clone());
        let responder = MockChatClient::new("responder", seed).with_responder(move |call| {
            let question = call.prompt();
            let Some((c, answer, kind)) = o.lookup(question) else {
                return Ok("I do not recognise this item.\nAnswer: unknown".into());
            };
            let world = w.read().unwrap_or_else(|e| e.into_inner());
            Ok(world_answer(&world, call.seed, c, question, 0, &answer, kind))
        });

        let verifier = MockChatClient::new("verifier", seed).with_responder(|call| {
            let v = payload(call)?;
            let response = v.get("response").and_then(Value::as_str).unwrap_or("");
            let final_answer = extract_final_answer(response);
            Ok(json!({
                "final_answer": final_answer,
                "steps": [{"step_index": 0, "passed": true, "note": "reads the image"}],
            })
            .to_string())
        });

        let analyst = MockChatClient::new("analyst", seed).with_responder(|call| {
            let v = payload(call)?;
            let c = category_of(&v);
            let n = v.get("failures").and_then(Value::as_array).map_or(0, Vec::len);
            let pattern = profile(c).1;
            Ok(json!({
                "patterns": [pattern],
                "hints": [
                    format!("target: {pattern}"),
                    format!("use {} with fine detail", profile(c).0),
                    if n > 5 { "lower difficulty slightly".to_string() } else { "keep difficulty moderate".to_string() },
                ],
            })
            .to_string())
        });

        let edit_rate = config.edit_rate;
        let planner = MockChatClient::new("planner", seed).with_responder(move |call| {
            let v = payload(call)?;
            let c = category_of(&v);
            let index = v.get("sample_index").and_then(Value::as_u64).unwrap_or(0);
            let (kind, unit) = kind_for(call.seed, c, index);
            let kind = match kind {
                AnswerKind::Choice => "multiple-choice",
                AnswerKind::Numeric => "numeric",
                AnswerKind::Exact => "short-text",
            };
            let (s, i) = (call.seed.to_string(), index.to_string());
            let structured = unit_interval(&["structured", &s, c.id(), &i]) < 0.25;
            let e = unit_interval(&["edit", &s, c.id(), &i]);
            let edit = if e < edit_rate / 3.0 {
                json!({"operation": "stitch", "instruction": "place the two views side by side"})
            } else if e < edit_rate {
                json!({"operation": "crop", "instruction": "crop to the region of interest"})
            } else {
                Value::Null
            };
            let direction = v
                .get("hints")
                .and_then(Value::as_array)
                .and_then(|h| h.first())
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            Ok(json!({
                "image_req": profile(c).0,
                "search_tags": [c.id()],
                "question_kind": kind,
                "unit_required": unit,
                "structured_output": structured,
                "direction": direction,
                "edit": edit,
            })
            .to_string())
        });

        let classifier = MockChatClient::new("classifier", seed).with_responder(|call| {
            let v = payload(call)?;
            let title = v.get("title").and_then(Value::as_str).unwrap_or("");
            Ok(json!({"match": !title.contains("unrelated")}).to_string())
        });

        let (o, rate) = (oracle.clone(), config.malformed_rate);
        let generator = MockChatClient::new("generator", seed).with_responder(move |call| {
            let v = payload(call)?;
            let c = category_of(&v);
            let index = v.get("sample_index").and_then(Value::as_u64).unwrap_or(0);
            let image = v.get("image").and_then(Value::as_str).unwrap_or("");
            let kind = match v.get("question_kind").and_then(Value::as_str).unwrap_or("") {
                "multiple-choice" => AnswerKind::Choice,
                "numeric" => AnswerKind::Numeric,
                _ => AnswerKind::Exact,
            };
            let unit = v.get("unit_required").and_then(Value::as_bool).unwrap_or(false);
            let structured = v.get("structured_output").and_then(Value::as_bool).unwrap_or(false);
            let (s, i) = (call.seed.to_string(), index.to_string());
            let (mut question, mut answer) = synth_item(&["gen", &s, c.id(), &i, image], c, kind, unit);
            question = format!("{question} (sample {}-{index})", c.id());
            let mut kind_out = kind;
            match injected_fault(call.seed, c, index, rate) {
                Some(InjectedFault::MissingOptions) => {
                    question = format!("In the {}, which option is correct? (sample {}-{index})", profile(c).0, c.id());
                    answer = "B".into();
                    kind_out = AnswerKind::Choice;
                }
                Some(InjectedFault::Unanswerable) => question = format!("{question} {UNANSWERABLE_MARKER}"),
                Some(InjectedFault::WrongCategory) => question = format!("{question} {OFF_TOPIC_MARKER}"),
                None => {}
            }
            if structured {
                let fmt = v.get("answer_format").and_then(Value::as_str).unwrap_or("");
                question = format!("{question}\nAnswer format: {fmt}");
            }
            o.register(&question, c, &answer, kind_out);
            Ok(json!({"question": question, "answer": answer, "answer_kind": kind_out.as_str()}).to_string())
        });

        let validator = MockChatClient::new("validator", seed).with_responder(|call| {
            let v = payload(call)?;
            let q = v.get("question").and_then(Value::as_str).unwrap_or("");
            Ok(json!({
                "category_match": !q.contains(OFF_TOPIC_MARKER),
                "solvable": !q.contains(UNANSWERABLE_MARKER),
                "reason": "",
            })
            .to_string())
        });

        let judges = (0..config.judges.max(1))
            .map(|j| {
                MockChatClient::new(format!("judge-{j}"), seed ^ (j as u64 + 1)).with_responder(|call| {
                    let v = payload(call)?;
                    let q = v.get("question").and_then(Value::as_str).unwrap_or("");
                    let s = call.seed.to_string();
                    let score = |aspect: &str| 3 + stable_hash(&["judge", &s, aspect, q]) % 3;
                    Ok(json!({"CL": score("CL"), "S": score("S"), "CO": score("CO")}).to_string())
                })
            })
            .collect();

        let search = MockSearchClient::new(move |q: &SearchQuery| Ok(sim_search(seed, q)));

        Self {
            world,
            oracle,
            embedder: MockEmbedder::dense(config.embedding_dim),
            config,
            responder,
            verifier,
            analyst,
            planner,
            classifier,
            generator,
            validator,
            judges,
            search,
            editor: MockEditClient,
        }
    }

    pub fn judge_clients(&self) -> Vec<&dyn ChatClient> {
        self.judges.iter().map(|j| j as &dyn ChatClient).collect()
    }

    /// Rollout policy answering from the current world state.
    pub fn rollout_policy(&self) -> WorldRolloutPolicy {
        WorldRolloutPolicy { world: self.world.read().unwrap_or_else(|e| e.into_inner()).clone(), seed: self.config.seed }
    }
}

/// Ranked hits for a query. Occasionally a decoy or an undersized image is
/// ranked first so the selector's filters have work to do.
fn sim_search(seed: u64, q: &SearchQuery) -> Vec<SearchHit> {
    let text = q.query_string();
    let lower = text.to_lowercase();
    let c = CapabilityCategory::ALL
        .iter()
        .copied()
        .find(|c| lower.contains(c.id()) || lower.contains(&c.display_name().to_lowercase()))
        .unwrap_or(CapabilityCategory::Others);
    let s = seed.to_string();
    let digest = &crate::util::digest_hex(text.as_bytes())[..12];
    let mut hits = Vec::new();
    let u = unit_interval(&["search", &s, &text]);
    if u < 0.15 {
        hits.push(SearchHit { url: format!("sim://{}/{digest}-decoy.png", c.id()), title: "unrelated stock photo".into(), width: Some(800), height: Some(600), bytes: Some(90_000) });
    } else if u < 0.3 {
        hits.push(SearchHit { url: format!("sim://{}/{digest}-thumb.png", c.id()), title: text.clone(), width: Some(120), height: Some(90), bytes: Some(4_000) });
    }
    for r in 0..q.top_k {
        hits.push(SearchHit {
            url: format!("sim://{}/{digest}-{r}.png", c.id()),
            title: format!("{text} #{r}"),
            width: Some(640 + 32 * r as u32),
            height: Some(480),
            bytes: Some(150_000),
        });
    }
    hits.truncate(q.top_k);
    hits
}

/// Answers records from a frozen world snapshot: correct with probability
/// `s_c`, independently per rollout index.
#[derive(Debug, Clone)]
pub struct WorldRolloutPolicy {
    pub world: SyntheticWorld,
    pub seed: u64,
}

impl RolloutPolicy for WorldRolloutPolicy {
    fn rollout(&self, record: &DatasetRecord, index: usize) -> Result<String, AgentError> {
        Ok(world_answer(&self.world, self.seed, record.category, &record.id, index + 1, &record.answer, record.answer_kind))
    }
}
