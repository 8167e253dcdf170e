//! Workspace layout, stage runners, the evolve loop and the paired
//! guided-versus-uniform simulation.
//!
//! ```text
//! {workspace}/
//!   config.toml             effective configuration of the last evolve
//!   pool.jsonl              diagnostic pool (generated in mock mode)
//!   journal.jsonl           completed stages, append-only
//!   world.json              initial synthetic world (mock mode)
//!   summary.json|csv        per-iteration, per-category table
//!   iterations/{k}/
//!     report.json           diagnostic report
//!     dataset.jsonl         accepted samples (dataset.partial.jsonl while running)
//!     manifest.json ledger.json
//!     profiles.jsonl profiles.csv train.jsonl
//!     metrics.jsonl checkpoint.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agents::Modality;
use crate::analysis::{diversity, embed_corpus, judge_questions, quality_score, DiversityReport, QualityReport};
use crate::agents::sim::{seed_pool, shared, SimAgents, SimConfig};
use crate::agents::{
    world_step, AgentError, ChatClient, EditRequest, Embedder, HttpChatClient, HttpEditClient, HttpEmbedder,
    HttpSearchClient, ImageEditClient, ImageSearchClient, SyntheticWorld,
};
use crate::capability::{CapabilityCategory, DatasetRecord, ImageAsset};
use crate::config::{MixtureMode, RunConfig};
use crate::diagnosis::{diagnose, DiagnoseConfig, DiagnosisAgents, DiagnosticReport, MixtureVector};
use crate::error::DpeError;
use crate::grpo::{train_iteration, write_metrics, Checkpoint, Policy, StepMetrics, TabularSoftmaxPolicy};
use crate::learnability::{
    filter_dataset, write_profiles, AnswerVerifier, ChatRolloutPolicy, FilterConfig, FilterOutcome, LearnabilityProfile,
    RolloutPolicy,
};
use crate::questioner::{generate_dataset, GenerationConfig, GenerationManifest, GenerationOutcome, QuestionerAgents};
use crate::store::{self, JsonlAppender, SCHEMA_VERSION};
use crate::util::{digest_hex, stable_hash};

/// Timestamp stamped into artifacts of mock runs.
pub const FIXED_CLOCK: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn iteration_dir(&self, k: u32) -> PathBuf {
        self.root.join("iterations").join(k.to_string())
    }

    pub fn report(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("report.json")
    }

    pub fn dataset(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("dataset.jsonl")
    }

    pub fn partial_dataset(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("dataset.partial.jsonl")
    }

    pub fn manifest(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("manifest.json")
    }

    pub fn ledger(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("ledger.json")
    }

    pub fn profiles_jsonl(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("profiles.jsonl")
    }

    pub fn profiles_csv(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("profiles.csv")
    }

    pub fn train_set(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("train.jsonl")
    }

    pub fn metrics(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("metrics.jsonl")
    }

    pub fn checkpoint(&self, k: u32) -> PathBuf {
        self.iteration_dir(k).join("checkpoint.json")
    }

    pub fn journal(&self) -> PathBuf {
        self.root.join("journal.jsonl")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn initial_world(&self) -> PathBuf {
        self.root.join("world.json")
    }

    pub fn summary_json(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn summary_csv(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Diagnose,
    Generate,
    Filter,
    Train,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Diagnose, Stage::Generate, Stage::Filter, Stage::Train];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub schema_version: String,
    pub iteration: u32,
    pub stage: Stage,
    /// Artifact path relative to the workspace root.
    pub artifact: String,
    /// SHA-256 of the artifact when the stage completed.
    pub digest: String,
}

/// Append-only record of completed stages. A stage counts as done only
/// while its artifact still has the journaled digest.
pub struct Journal {
    root: PathBuf,
    path: PathBuf,
    entries: Vec<JournalEntry>,
}

fn file_digest(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| digest_hex(&b))
}

impl Journal {
    pub fn open(ws: &Workspace) -> Result<Self, DpeError> {
        let path = ws.journal();
        let entries = match store::read_jsonl(&path) {
            Ok(e) => e,
            Err(e) if e.is_not_found() => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self { root: ws.root().to_path_buf(), path, entries })
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn is_done(&self, iteration: u32, stage: Stage) -> bool {
        self.entries
            .iter()
            .rev()
            .find(|e| e.iteration == iteration && e.stage == stage)
            .is_some_and(|e| file_digest(&self.root.join(&e.artifact)).as_deref() == Some(e.digest.as_str()))
    }

    pub fn record(&mut self, iteration: u32, stage: Stage, artifact: &Path) -> Result<(), DpeError> {
        let digest = file_digest(artifact).ok_or_else(|| DpeError::MissingInput {
            path: artifact.to_path_buf(),
            detail: "stage artifact vanished before journaling".into(),
        })?;
        let rel = artifact.strip_prefix(&self.root).unwrap_or(artifact);
        let entry = JournalEntry {
            schema_version: SCHEMA_VERSION.into(),
            iteration,
            stage,
            artifact: rel.to_string_lossy().replace('\\', "/"),
            digest,
        };
        JsonlAppender::append_to(&self.path)?.push(&entry)?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn clear(&mut self) -> Result<(), DpeError> {
        store::write_atomic(&self.path, b"")?;
        self.entries.clear();
        Ok(())
    }
}

/// Borrowed view of every client the loop needs.
pub struct AgentSet<'a> {
    pub responder: &'a dyn ChatClient,
    pub verifier: &'a dyn ChatClient,
    pub analyst: &'a dyn ChatClient,
    pub planner: &'a dyn ChatClient,
    pub classifier: &'a dyn ChatClient,
    pub generator: &'a dyn ChatClient,
    pub validator: &'a dyn ChatClient,
    pub judges: Vec<&'a dyn ChatClient>,
    pub search: &'a dyn ImageSearchClient,
    pub editor: &'a dyn ImageEditClient,
    pub embedder: &'a dyn Embedder,
}

/// Stand-in when no edit endpoint is configured: edit plans fail and the
/// attempt is retried under the quota's retry budget.
struct NoEditService;

impl ImageEditClient for NoEditService {
    fn edit(&self, _: &EditRequest, _: &[ImageAsset]) -> Result<ImageAsset, AgentError> {
        Err(AgentError::Config("no image edit endpoint configured (agents.edit_base_url)".into()))
    }
}

pub struct LiveAgents {
    responder: HttpChatClient,
    verifier: HttpChatClient,
    analyst: HttpChatClient,
    planner: HttpChatClient,
    classifier: HttpChatClient,
    generator: HttpChatClient,
    validator: HttpChatClient,
    judges: Vec<HttpChatClient>,
    search: HttpSearchClient,
    editor: Box<dyn ImageEditClient>,
    embedder: HttpEmbedder,
}

impl LiveAgents {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, AgentError> {
        let a = &cfg.agents;
        let timeout = Duration::from_secs(a.timeout_secs.max(1));
        let chat = |model: &str| -> Result<HttpChatClient, AgentError> {
            Ok(HttpChatClient::from_env(model)?.with_timeout(timeout)?.with_max_in_flight(cfg.run.concurrency))
        };
        let editor: Box<dyn ImageEditClient> = if a.edit_base_url.trim().is_empty() {
            Box::new(NoEditService)
        } else {
            Box::new(HttpEditClient::from_env(a.edit_base_url.clone())?)
        };
        Ok(Self {
            responder: chat(&a.responder)?,
            verifier: chat(&a.verifier)?,
            analyst: chat(&a.analyst)?,
            planner: chat(&a.planner)?,
            classifier: chat(&a.classifier)?,
            generator: chat(&a.generator)?,
            validator: chat(&a.validator)?,
            judges: a.judges.iter().map(|m| chat(m)).collect::<Result<_, _>>()?,
            search: HttpSearchClient::from_env(a.search_base_url.clone())?,
            editor,
            embedder: HttpEmbedder::from_env(a.embedding.clone())?,
        })
    }
}

pub enum Backend {
    Sim(Box<SimAgents>),
    Live(Box<LiveAgents>),
}

impl Backend {
    /// Scripted agents over the configured synthetic world.
    pub fn sim(cfg: &RunConfig) -> Self {
        let world = SyntheticWorld::seeded(&cfg.world.world, cfg.run.seed);
        let sim = SimConfig {
            seed: cfg.run.seed,
            malformed_rate: cfg.world.malformed_rate,
            edit_rate: cfg.world.edit_rate,
            judges: cfg.agents.judges.len(),
            embedding_dim: cfg.analysis.embedding_dim,
        };
        Self::Sim(Box::new(SimAgents::new(shared(world), sim)))
    }

    pub fn for_config(cfg: &RunConfig) -> Result<Self, DpeError> {
        if cfg.run.mock {
            Ok(Self::sim(cfg))
        } else {
            Ok(Self::Live(Box::new(LiveAgents::from_config(cfg)?)))
        }
    }

    pub fn is_sim(&self) -> bool {
        matches!(self, Self::Sim(_))
    }

    pub fn agents(&self) -> AgentSet<'_> {
        match self {
            Self::Sim(s) => AgentSet {
                responder: &s.responder,
                verifier: &s.verifier,
                analyst: &s.analyst,
                planner: &s.planner,
                classifier: &s.classifier,
                generator: &s.generator,
                validator: &s.validator,
                judges: s.judge_clients(),
                search: &s.search,
                editor: &s.editor,
                embedder: &s.embedder,
            },
            Self::Live(l) => AgentSet {
                responder: &l.responder,
                verifier: &l.verifier,
                analyst: &l.analyst,
                planner: &l.planner,
                classifier: &l.classifier,
                generator: &l.generator,
                validator: &l.validator,
                judges: l.judges.iter().map(|j| j as &dyn ChatClient).collect(),
                search: &l.search,
                editor: l.editor.as_ref(),
                embedder: &l.embedder,
            },
        }
    }

    pub fn world(&self) -> Option<SyntheticWorld> {
        match self {
            Self::Sim(s) => Some(s.world.read().unwrap_or_else(|e| e.into_inner()).clone()),
            Self::Live(_) => None,
        }
    }

    fn set_world(&self, world: SyntheticWorld) {
        if let Self::Sim(s) = self {
            *s.world.write().unwrap_or_else(|e| e.into_inner()) = world;
        }
    }
}

/// Carried from one iteration to the next inside the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Synthetic world after the learning response (mock mode).
    pub world: Option<SyntheticWorld>,
    /// Per-category correct-answer probability of the trained toy policy.
    pub policy_p_correct: BTreeMap<CapabilityCategory, f64>,
    pub trained_samples: usize,
    pub effective_prompts: usize,
    pub failed_prompts: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint<TrainState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: u32,
    pub category: CapabilityCategory,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub alpha: f64,
    pub target: u64,
    pub accepted: usize,
    pub kept: usize,
    pub skill_before: Option<f64>,
    pub skill_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveSummary {
    pub schema_version: String,
    pub iterations: u32,
    pub mixture: MixtureMode,
    pub rows: Vec<SummaryRow>,
    pub initial_world: Option<SyntheticWorld>,
    pub final_world: Option<SyntheticWorld>,
}

pub type ProgressFn = Arc<dyn Fn(&str) + Send + Sync>;

pub struct Pipeline {
    pub config: RunConfig,
    pub workspace: Workspace,
    pub backend: Backend,
    pub force: bool,
    progress: ProgressFn,
    cancel: Option<Arc<AtomicBool>>,
    initial_world: Option<SyntheticWorld>,
}

impl Pipeline {
    pub fn new(config: RunConfig, backend: Backend) -> Self {
        let initial_world = backend.world();
        Self {
            workspace: Workspace::new(config.run.workspace.clone()),
            config,
            backend,
            force: false,
            progress: Arc::new(|_| {}),
            cancel: None,
            initial_world,
        }
    }

    pub fn from_config(config: RunConfig) -> Result<Self, DpeError> {
        let backend = Backend::for_config(&config)?;
        Ok(Self::new(config, backend))
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn with_progress(mut self, f: ProgressFn) -> Self {
        self.progress = f;
        self
    }

    /// Setting the flag stops generation after the attempts in flight.
    pub fn with_cancel(mut self, flag: Arc<AtomicBool>) -> Self {
        self.cancel = Some(flag);
        self
    }

    fn say(&self, msg: &str) {
        (self.progress)(msg);
    }

    pub fn clock(&self) -> String {
        if !self.config.run.clock.is_empty() {
            self.config.run.clock.clone()
        } else if self.backend.is_sim() {
            FIXED_CLOCK.into()
        } else {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        }
    }

    pub fn active_categories(&self) -> Vec<CapabilityCategory> {
        self.config.world.world.active_categories()
    }

    /// Load the diagnostic pool. Mock runs create it on first use.
    pub fn pool(&self) -> Result<Vec<DatasetRecord>, DpeError> {
        let path = self.config.pool_path();
        let pool = match store::read_jsonl::<DatasetRecord>(&path) {
            Ok(p) => p,
            Err(e) if e.is_not_found() && self.backend.is_sim() => {
                let p = seed_pool(&self.config.world.world, self.config.run.seed);
                store::write_jsonl(&path, &p)?;
                p
            }
            Err(e) => return Err(e.into()),
        };
        if pool.is_empty() {
            return Err(DpeError::MissingInput { path, detail: "diagnostic pool is empty".into() });
        }
        if let Backend::Sim(s) = &self.backend {
            s.oracle.register_records(&pool);
        }
        Ok(pool)
    }

    /// World state at the start of iteration `k`: the initial world, or the
    /// one stored in the previous checkpoint.
    fn world_before(&self, k: u32) -> Result<Option<SyntheticWorld>, DpeError> {
        if !self.backend.is_sim() {
            return Ok(None);
        }
        if k == 0 {
            return Ok(self.initial_world.clone());
        }
        let prev = self.workspace.checkpoint(k - 1);
        let ckpt: Checkpoint<TrainState> = Checkpoint::load(&prev).map_err(|e| match e {
            e if e.is_not_found() => DpeError::MissingInput { path: prev.clone(), detail: "previous iteration not trained".into() },
            e => e.into(),
        })?;
        Ok(ckpt.state.world)
    }

    /// Put the backend into the state iteration `k` starts from.
    pub fn prepare_iteration(&self, k: u32) -> Result<(), DpeError> {
        if let Some(w) = self.world_before(k)? {
            self.backend.set_world(w);
        }
        Ok(())
    }

    fn diagnostic_seed(&self, k: u32) -> u64 {
        let seed = self.config.run.seed;
        if self.config.diagnosis.fixed_set {
            seed
        } else {
            stable_hash(&["diagnose", &seed.to_string(), &k.to_string()])
        }
    }

    pub fn run_diagnose(&self, k: u32) -> Result<DiagnosticReport, DpeError> {
        let pool = self.pool()?;
        let a = self.backend.agents();
        let agents = DiagnosisAgents { model: a.responder, verifier: a.verifier, analyst: a.analyst };
        let cfg = DiagnoseConfig {
            iteration: k,
            sample_size: self.config.diagnosis.sample_size,
            seed: self.diagnostic_seed(k),
            bands: self.config.diagnosis.bands.clone(),
            active: self.active_categories(),
            concurrency: self.config.run.concurrency,
            created_at: self.clock(),
        };
        let report = diagnose(&agents, &pool, &cfg)?;
        report.save(&self.workspace.report(k))?;
        Ok(report)
    }

    pub fn mixture_for(&self, report: &DiagnosticReport) -> Result<MixtureVector, DpeError> {
        Ok(match self.config.generation.mixture {
            MixtureMode::Guided => report.mixture_vector()?,
            MixtureMode::Uniform => MixtureVector::uniform(&self.active_categories()),
        })
    }

    pub fn run_generate(&self, k: u32, report: &DiagnosticReport) -> Result<GenerationOutcome, DpeError> {
        let a = self.backend.agents();
        let g = &self.config.generation;
        let agents = QuestionerAgents {
            planner: a.planner,
            classifier: g.use_classifier.then_some(a.classifier),
            generator: a.generator,
            validator: a.validator,
            search: a.search,
            editor: a.editor,
        };
        let cfg = GenerationConfig {
            iteration: k,
            seed: self.config.run.seed,
            retry_budget: g.retry_budget,
            concurrency: self.config.run.concurrency,
            parse_retries: g.parse_retries,
            selector: g.selector.clone(),
            progress_every: g.progress_every,
            stream_path: Some(self.workspace.partial_dataset(k)),
        };
        let mixture = self.mixture_for(report)?;
        let progress = |n: u64, m: u64| self.say(&format!("iteration {k}: generated {n}/{m}"));
        let out = generate_dataset(report, &mixture, g.budget, &agents, &cfg, &progress, self.cancel.as_deref())?;
        if out.manifest.cancelled {
            return Err(DpeError::Interrupted(format!("generation of iteration {k}")));
        }
        let accepted: u64 = out.ledger.total_committed();
        if accepted != out.records.len() as u64 {
            return Err(DpeError::Invariant(format!("ledger commits {accepted} but {} records accepted", out.records.len())));
        }
        for (c, q) in &out.ledger.categories {
            if q.committed > q.target {
                return Err(DpeError::Invariant(format!("{c}: committed {} exceeds target {}", q.committed, q.target)));
            }
        }
        let ws = &self.workspace;
        out.write(&ws.dataset(k), &ws.manifest(k), &ws.ledger(k))?;
        let _ = std::fs::remove_file(ws.partial_dataset(k));
        if !out.manifest.is_saturated() {
            self.say(&format!("iteration {k}: quota shortfall {:?}", out.manifest.shortfall));
        }
        Ok(out)
    }

    pub fn run_filter(&self, k: u32, dataset: &[DatasetRecord]) -> Result<FilterOutcome, DpeError> {
        let l = &self.config.learnability;
        let cfg = FilterConfig { rollouts: l.rollouts, band: l.band, beta: l.beta, concurrency: self.config.run.concurrency };
        let a = self.backend.agents();
        let chat_policy;
        let world_policy;
        let policy: &dyn RolloutPolicy = match &self.backend {
            Backend::Sim(s) => {
                world_policy = s.rollout_policy();
                &world_policy
            }
            Backend::Live(_) => {
                chat_policy = ChatRolloutPolicy { client: a.responder, temperature: l.temperature };
                &chat_policy
            }
        };
        let out = filter_dataset(dataset, policy, &AnswerVerifier, &cfg)?;
        if let Some(w) = &out.warning {
            self.say(&format!("iteration {k}: {w}"));
        }
        let ws = &self.workspace;
        write_profiles(&ws.profiles_jsonl(k), &ws.profiles_csv(k), &out.profiles)?;
        store::write_jsonl(&ws.train_set(k), &out.kept)?;
        Ok(out)
    }

    /// GRPO over the toy per-category policy, then (mock mode) the world's
    /// learning response on the kept samples.
    pub fn run_train(&self, k: u32, kept: &[DatasetRecord], report: &DiagnosticReport) -> Result<TrainOutcome, DpeError> {
        let world = self.backend.world();
        let start = |c: CapabilityCategory| -> f64 {
            match &world {
                Some(w) if w.skills.contains_key(&c) => w.skill(c),
                Some(_) => 0.5,
                None => report.stats_for(c).and_then(|s| s.accuracy).unwrap_or(0.5),
            }
        };
        let mut policy = TabularSoftmaxPolicy::new(CapabilityCategory::COUNT, 2);
        for c in CapabilityCategory::ALL {
            policy.set_token_probability(c.index(), 0, start(c));
        }
        let prompts: Vec<usize> = kept.iter().map(|r| r.category.index()).collect();
        let mut reward = |_: usize, y: &[usize]| -> Result<f64, AgentError> { Ok(f64::from(u8::from(y[0] == 0))) };
        let seed = stable_hash(&["train", &self.config.run.seed.to_string(), &k.to_string()]);
        let outcome = train_iteration(&mut policy, &prompts, &mut reward, &self.config.grpo, k, seed)?;

        let world_after = world.map(|mut w| {
            world_step(&mut w, kept);
            w
        });
        if let Some(w) = &world_after {
            self.backend.set_world(w.clone());
        }
        let state = TrainState {
            world: world_after,
            policy_p_correct: CapabilityCategory::ALL.iter().map(|&c| (c, policy.probs(c.index(), 0)[0])).collect(),
            trained_samples: kept.len(),
            effective_prompts: outcome.effective_prompts.len(),
            failed_prompts: outcome.failed_prompts.len(),
        };
        let checkpoint = Checkpoint::new(k, policy.parameters(), self.config.grpo.clone(), state);
        write_metrics(&self.workspace.metrics(k), &outcome.steps)?;
        checkpoint.save(&self.workspace.checkpoint(k))?;
        Ok(TrainOutcome { metrics: outcome.steps, checkpoint })
    }

    fn load_report(&self, k: u32) -> Result<DiagnosticReport, DpeError> {
        Ok(DiagnosticReport::load(&self.workspace.report(k))?)
    }

    fn load_records(&self, path: &Path) -> Result<Vec<DatasetRecord>, DpeError> {
        Ok(store::read_jsonl(path)?)
    }

    /// Run the full loop for `run.iterations` iterations, skipping stages
    /// the journal marks as done. Once a stage reruns, everything after it
    /// reruns too.
    pub fn evolve(&self) -> Result<EvolveSummary, DpeError> {
        let ws = &self.workspace;
        std::fs::create_dir_all(ws.root()).map_err(|e| store::StoreError::io(ws.root(), e))?;
        store::write_atomic(&ws.config_snapshot(), self.config.to_toml().as_bytes())?;
        if let Some(w) = &self.initial_world {
            store::write_json(&ws.initial_world(), w)?;
        }
        let mut journal = Journal::open(ws)?;
        if self.force {
            journal.clear()?;
        }
        let mut dirty = false;
        for k in 0..self.config.run.iterations {
            self.prepare_iteration(k)?;
            let mut fresh = |stage: Stage, journal: &Journal| {
                dirty = dirty || !journal.is_done(k, stage);
                dirty
            };

            let report = if fresh(Stage::Diagnose, &journal) {
                self.say(&format!("iteration {k}: diagnose"));
                let r = self.run_diagnose(k)?;
                journal.record(k, Stage::Diagnose, &ws.report(k))?;
                r
            } else {
                self.pool()?;
                self.load_report(k)?
            };

            let dataset = if fresh(Stage::Generate, &journal) {
                self.say(&format!("iteration {k}: generate {} samples", self.config.generation.budget));
                let out = self.run_generate(k, &report)?;
                journal.record(k, Stage::Generate, &ws.dataset(k))?;
                out.records
            } else {
                self.load_records(&ws.dataset(k))?
            };

            let kept = if fresh(Stage::Filter, &journal) {
                self.say(&format!("iteration {k}: filter {} samples", dataset.len()));
                let out = self.run_filter(k, &dataset)?;
                journal.record(k, Stage::Filter, &ws.train_set(k))?;
                out.kept
            } else {
                self.load_records(&ws.train_set(k))?
            };

            if fresh(Stage::Train, &journal) {
                self.say(&format!("iteration {k}: train on {} samples", kept.len()));
                self.run_train(k, &kept, &report)?;
                journal.record(k, Stage::Train, &ws.checkpoint(k))?;
            }
        }
        let summary = self.summarize()?;
        store::write_json(&ws.summary_json(), &summary)?;
        store::write_csv(&ws.summary_csv(), &summary.rows)?;
        Ok(summary)
    }

    /// Run one stage of iteration `k` from the artifacts already on disk
    /// and journal it. Returns the stage's artifact path.
    pub fn run_stage(&self, stage: Stage, k: u32) -> Result<PathBuf, DpeError> {
        let ws = &self.workspace;
        self.prepare_iteration(k)?;
        let artifact = match stage {
            Stage::Diagnose => {
                self.run_diagnose(k)?;
                ws.report(k)
            }
            Stage::Generate => {
                let report = self.load_report(k)?;
                self.run_generate(k, &report)?;
                ws.dataset(k)
            }
            Stage::Filter => {
                let dataset = self.load_records(&ws.dataset(k))?;
                self.run_filter(k, &dataset)?;
                ws.train_set(k)
            }
            Stage::Train => {
                let report = self.load_report(k)?;
                let kept = self.load_records(&ws.train_set(k))?;
                self.run_train(k, &kept, &report)?;
                ws.checkpoint(k)
            }
        };
        Journal::open(ws)?.record(k, stage, &artifact)?;
        Ok(artifact)
    }

    /// Embedding diversity of iteration `k`'s dataset. Writes
    /// `diversity_{modality}.json` and the raw vectors as CSV.
    pub fn run_diversity(&self, k: u32, modality: Modality) -> Result<DiversityReport, DpeError> {
        let dataset = self.load_records(&self.workspace.dataset(k))?;
        let (set, skipped) = embed_corpus(&dataset, self.backend.agents().embedder, modality, self.config.run.concurrency)?;
        let report = DiversityReport {
            schema_version: SCHEMA_VERSION.into(),
            modality,
            n: set.len(),
            dimension: set.dimension(),
            diversity: diversity(&set)?,
            skipped,
        };
        let dir = self.workspace.iteration_dir(k);
        report.save(&dir.join(format!("diversity_{}.json", modality.as_str())))?;
        set.write_csv(&dir.join(format!("vectors_{}.csv", modality.as_str())))?;
        Ok(report)
    }

    /// Judge-based quality score over a seeded sample of iteration `k`'s
    /// dataset. Writes `quality.json`.
    pub fn run_quality(&self, k: u32) -> Result<QualityReport, DpeError> {
        let dataset = self.load_records(&self.workspace.dataset(k))?;
        let a = self.backend.agents();
        let seed = stable_hash(&["quality", &self.config.run.seed.to_string(), &k.to_string()]);
        let (ratings, coverage) =
            judge_questions(&dataset, &a.judges, self.config.analysis.judge_samples, seed, self.config.run.concurrency)?;
        let report = quality_score(&ratings, coverage)?;
        report.save(&self.workspace.iteration_dir(k).join("quality.json"))?;
        Ok(report)
    }

    /// Rows = iterations × active categories, read back from the artifacts.
    pub fn summarize(&self) -> Result<EvolveSummary, DpeError> {
        let ws = &self.workspace;
        let mut rows = Vec::new();
        let mut final_world = None;
        for k in 0..self.config.run.iterations {
            let report = self.load_report(k)?;
            let manifest: GenerationManifest = store::read_json(&ws.manifest(k))?;
            let dataset: Vec<DatasetRecord> = self.load_records(&ws.dataset(k))?;
            let profiles: Vec<LearnabilityProfile> = store::read_jsonl(&ws.profiles_jsonl(k))?;
            let kept_ids: std::collections::HashSet<&str> =
                profiles.iter().filter(|p| p.kept).map(|p| p.sample_id.as_str()).collect();
            let ckpt: Checkpoint<TrainState> = Checkpoint::load(&ws.checkpoint(k))?;
            let before = self.world_before(k)?;
            for c in self.active_categories() {
                let stats = report.stats_for(c);
                rows.push(SummaryRow {
                    iteration: k,
                    category: c,
                    count: stats.map_or(0, |s| s.count),
                    accuracy: stats.and_then(|s| s.accuracy),
                    alpha: manifest.mixture.get(&c).copied().unwrap_or(0.0),
                    target: manifest.targets.get(&c).copied().unwrap_or(0),
                    accepted: dataset.iter().filter(|r| r.category == c).count(),
                    kept: dataset.iter().filter(|r| r.category == c && kept_ids.contains(r.id.as_str())).count(),
                    skill_before: before.as_ref().map(|w| w.skill(c)),
                    skill_after: ckpt.state.world.as_ref().map(|w| w.skill(c)),
                });
            }
            final_world = ckpt.state.world;
        }
        Ok(EvolveSummary {
            schema_version: SCHEMA_VERSION.into(),
            iterations: self.config.run.iterations,
            mixture: self.config.generation.mixture,
            rows,
            initial_world: self.initial_world.clone(),
            final_world,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub mixture: MixtureMode,
    pub final_skills: BTreeMap<CapabilityCategory, f64>,
    pub min_skill: f64,
    pub min_category: CapabilityCategory,
    /// Mixture used in the first iteration.
    pub first_mixture: BTreeMap<CapabilityCategory, f64>,
    pub accepted_per_iteration: Vec<usize>,
    pub trained_per_iteration: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema_version: String,
    pub seed: u64,
    pub iterations: u32,
    pub budget: u64,
    pub initial_skills: BTreeMap<CapabilityCategory, f64>,
    pub weakest_initial: CapabilityCategory,
    /// The weakest initial category's first-iteration α equals the largest α.
    pub weakest_gets_largest_alpha: bool,
    pub guided: ArmResult,
    pub uniform: ArmResult,
    /// guided.min_skill − uniform.min_skill
    pub min_skill_gain: f64,
}

fn arm_result(summary: &EvolveSummary) -> Result<ArmResult, DpeError> {
    let world = summary
        .final_world
        .as_ref()
        .ok_or_else(|| DpeError::Invariant("simulation arm produced no world".into()))?;
    let (min_category, min_skill) = world.min_skill();
    let iters = summary.iterations;
    let per_iter = |f: fn(&SummaryRow) -> usize| -> Vec<usize> {
        (0..iters).map(|k| summary.rows.iter().filter(|r| r.iteration == k).map(f).sum()).collect()
    };
    Ok(ArmResult {
        mixture: summary.mixture,
        final_skills: world.skills.clone(),
        min_skill,
        min_category,
        first_mixture: summary.rows.iter().filter(|r| r.iteration == 0).map(|r| (r.category, r.alpha)).collect(),
        accepted_per_iteration: per_iter(|r| r.accepted),
        trained_per_iteration: per_iter(|r| r.kept),
    })
}

/// Run evolve twice from identical seeds, once with the diagnosed mixture
/// and once with a uniform one, under `{workspace}/simulate/{arm}`.
pub fn simulate(config: &RunConfig, force: bool, progress: ProgressFn) -> Result<SimulationReport, DpeError> {
    let root = config.run.workspace.join("simulate");
    let mut arms = Vec::new();
    for mode in [MixtureMode::Guided, MixtureMode::Uniform] {
        let mut cfg = config.clone();
        cfg.run.mock = true;
        cfg.generation.mixture = mode;
        let name = match mode {
            MixtureMode::Guided => "guided",
            MixtureMode::Uniform => "uniform",
        };
        cfg.run.workspace = root.join(name);
        let p = progress.clone();
        let arm_progress: ProgressFn = Arc::new(move |m: &str| p(&format!("[{name}] {m}")));
        let pipeline = Pipeline::new(cfg.clone(), Backend::sim(&cfg)).with_force(force).with_progress(arm_progress);
        let summary = pipeline.evolve()?;
        arms.push((summary.initial_world.clone(), arm_result(&summary)?));
    }
    let (initial, guided) = arms.remove(0);
    let (_, uniform) = arms.remove(0);
    let initial = initial.ok_or_else(|| DpeError::Invariant("simulation has no initial world".into()))?;
    let (weakest, _) = initial.min_skill();
    let largest = guided.first_mixture.values().copied().fold(0.0, f64::max);
    let report = SimulationReport {
        schema_version: SCHEMA_VERSION.into(),
        seed: config.run.seed,
        iterations: config.run.iterations,
        budget: config.generation.budget,
        initial_skills: initial.skills.clone(),
        weakest_initial: weakest,
        weakest_gets_largest_alpha: guided.first_mixture.get(&weakest).is_some_and(|a| *a >= largest),
        min_skill_gain: guided.min_skill - uniform.min_skill,
        guided,
        uniform,
    };
    store::write_json(&root.join("simulation.json"), &report)?;
    let header: Vec<String> = ["category", "initial", "guided", "uniform", "alpha_guided_k0"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .initial_skills
        .iter()
        .map(|(c, s)| {
            vec![
                c.id().to_string(),
                format!("{s:.6}"),
                format!("{:.6}", report.guided.final_skills.get(c).copied().unwrap_or(0.0)),
                format!("{:.6}", report.uniform.final_skills.get(c).copied().unwrap_or(0.0)),
                format!("{:.6}", report.guided.first_mixture.get(c).copied().unwrap_or(0.0)),
            ]
        })
        .collect();
    store::write_csv_records(&root.join("simulation.csv"), &header, &rows)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run.mock = true;
        cfg.run.iterations = 2;
        cfg.run.workspace = dir.to_path_buf();
        cfg.run.concurrency = 4;
        cfg.diagnosis.sample_size = 60;
        cfg.generation.budget = 36;
        cfg.world.world.pool_size = 240;
        cfg
    }

    #[test]
    fn evolve_writes_layout_and_journal() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::from_config(small(dir.path())).unwrap();
        let summary = p.evolve().unwrap();
        assert_eq!(summary.rows.len(), 2 * 12);
        for k in 0..2 {
            for f in ["report.json", "dataset.jsonl", "manifest.json", "ledger.json", "profiles.jsonl", "profiles.csv", "train.jsonl", "metrics.jsonl", "checkpoint.json"] {
                assert!(p.workspace.iteration_dir(k).join(f).exists(), "{k}/{f}");
            }
            assert!(!p.workspace.partial_dataset(k).exists());
            let m: GenerationManifest = store::read_json(&p.workspace.manifest(k)).unwrap();
            assert_eq!(m.accepted, 36);
        }
        let j = Journal::open(&p.workspace).unwrap();
        assert_eq!(j.entries().len(), 8);
        assert!(Stage::ALL.iter().all(|&s| j.is_done(1, s)));
        // second run is a no-op on the journal
        p.evolve().unwrap();
        assert_eq!(Journal::open(&p.workspace).unwrap().entries().len(), 8);
    }

    #[test]
    fn tampered_artifact_reruns_from_that_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::from_config(small(dir.path())).unwrap();
        p.evolve().unwrap();
        let before = std::fs::read(p.workspace.dataset(1)).unwrap();
        std::fs::write(p.workspace.train_set(0), "").unwrap();
        let j = Journal::open(&p.workspace).unwrap();
        assert!(!j.is_done(0, Stage::Filter));
        assert!(j.is_done(0, Stage::Generate));
        p.evolve().unwrap();
        assert_eq!(std::fs::read(p.workspace.dataset(1)).unwrap(), before);
        assert_eq!(Journal::open(&p.workspace).unwrap().entries().len(), 8 + 6);
    }

    #[test]
    fn unusable_pool_path_fails_diagnosis() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("blocker"), "a file, not a directory").unwrap();
        let mut cfg = small(dir.path());
        cfg.diagnosis.pool = dir.path().join("blocker").join("pool.jsonl");
        let p = Pipeline::new(cfg.clone(), Backend::sim(&cfg));
        assert!(p.run_diagnose(0).is_err());
        let ok = small(dir.path());
        assert!(Pipeline::new(ok.clone(), Backend::sim(&ok)).run_diagnose(0).is_ok());
    }
}
