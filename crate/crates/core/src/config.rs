//! Run configuration: one TOML file with a section per stage, plus
//! environment overrides of the form `DPE__SECTION__KEY=value`.
//!
//! Credentials never live here; see the `DPE_*_API_KEY` variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::WorldConfig;
use crate::diagnosis::WeightBands;
use crate::grpo::GrpoConfig;
use crate::learnability::DifficultyBand;
use crate::questioner::SelectorConfig;

pub const ENV_PREFIX: &str = "DPE__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config is not valid TOML: {0}")]
    Parse(String),
    #[error("bad environment override {key}: {message}")]
    Env { key: String, message: String },
    #[error("invalid value for {field}: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureMode {
    /// Mixture from the diagnostic report's accuracy bands.
    #[default]
    Guided,
    /// Equal share per active category.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub iterations: u32,
    pub seed: u64,
    pub workspace: PathBuf,
    /// Use the scripted agents over the synthetic world.
    pub mock: bool,
    /// In-flight bound for agent calls.
    pub concurrency: usize,
    /// Timestamp written into artifacts; empty means wall clock. Mock runs
    /// always use a fixed stamp so artifacts are byte-stable.
    pub clock: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { iterations: 3, seed: 7, workspace: PathBuf::from("workspace"), mock: false, concurrency: 8, clock: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisSection {
    pub sample_size: usize,
    /// Diagnostic pool (JSONL). Relative paths resolve against the workspace.
    pub pool: PathBuf,
    /// Draw the same diagnostic set every iteration instead of a fresh one.
    pub fixed_set: bool,
    pub bands: WeightBands,
}

impl Default for DiagnosisSection {
    fn default() -> Self {
        Self { sample_size: 200, pool: PathBuf::from("pool.jsonl"), fixed_set: false, bands: WeightBands::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    pub budget: u64,
    pub mixture: MixtureMode,
    pub retry_budget: u32,
    pub parse_retries: u32,
    pub progress_every: usize,
    pub use_classifier: bool,
    pub selector: SelectorConfig,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            budget: 4000,
            mixture: MixtureMode::Guided,
            retry_budget: 5,
            parse_retries: 2,
            progress_every: 50,
            use_classifier: true,
            selector: SelectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnabilitySection {
    pub rollouts: usize,
    pub band: DifficultyBand,
    pub beta: f64,
    /// Sampling temperature for chat rollouts.
    pub temperature: f64,
}

impl Default for LearnabilitySection {
    fn default() -> Self {
        Self { rollouts: 8, band: DifficultyBand::default(), beta: 0.05, temperature: 1.0 }
    }
}

/// Role → model bindings. Endpoints and keys come from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentsSection {
    pub responder: String,
    pub verifier: String,
    pub analyst: String,
    pub planner: String,
    pub classifier: String,
    pub generator: String,
    pub validator: String,
    pub judges: Vec<String>,
    pub embedding: String,
    pub search_base_url: String,
    pub edit_base_url: String,
    pub timeout_secs: u64,
}

impl Default for AgentsSection {
    fn default() -> Self {
        let m = "gpt-4o".to_string();
        Self {
            responder: "policy".into(),
            verifier: m.clone(),
            analyst: m.clone(),
            planner: m.clone(),
            classifier: m.clone(),
            generator: m.clone(),
            validator: m.clone(),
            judges: vec![m.clone(), m.clone(), m],
            embedding: "text-embedding-3-small".into(),
            search_base_url: "https://google.serper.dev".into(),
            edit_base_url: String::new(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    #[serde(flatten)]
    pub world: WorldConfig,
    /// Share of deliberately malformed generator outputs.
    pub malformed_rate: f64,
    pub edit_rate: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self { world: WorldConfig::default(), malformed_rate: 0.1, edit_rate: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    pub judge_samples: usize,
    pub embedding_dim: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { judge_samples: 200, embedding_dim: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub diagnosis: DiagnosisSection,
    pub generation: GenerationSection,
    pub learnability: LearnabilitySection,
    pub grpo: GrpoConfig,
    pub agents: AgentsSection,
    pub world: WorldSection,
    pub analysis: AnalysisSection,
}

/// Parse a scalar override. TOML syntax first (numbers, booleans, arrays,
/// inline tables), bare strings otherwise.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.len() < 2 || path.iter().any(String::is_empty) {
        return Err(ConfigError::Env { key: key.into(), message: "expected SECTION__KEY".into() });
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node.entry(part.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Env { key: key.into(), message: format!("{part} is not a section") })?;
    }
    node.insert(path[path.len() - 1].clone(), override_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply overrides, validate.
    pub fn from_toml_with<I>(text: &str, overrides: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                apply_override(&mut table, rest, &v)?;
            }
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or defaults when `None`) with process-environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        Self::from_toml_with(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, message: String| Err(ConfigError::Invalid { field, message });
        if self.run.iterations == 0 {
            return invalid("run.iterations", "must be at least 1".into());
        }
        if self.run.concurrency == 0 {
            return invalid("run.concurrency", "must be at least 1".into());
        }
        if self.diagnosis.sample_size == 0 {
            return invalid("diagnosis.sample_size", "must be at least 1".into());
        }
        self.diagnosis.bands.validate().map_err(|e| ConfigError::Invalid { field: "diagnosis.bands", message: e.to_string() })?;
        if self.generation.budget == 0 {
            return invalid("generation.budget", "must be at least 1".into());
        }
        if self.learnability.rollouts == 0 {
            return invalid("learnability.rollouts", "must be at least 1".into());
        }
        self.learnability.band.validate().map_err(|e| ConfigError::Invalid { field: "learnability.band", message: e.to_string() })?;
        if !(self.learnability.beta > 0.0 && self.learnability.beta.is_finite()) {
            return invalid("learnability.beta", "must be positive and finite".into());
        }
        self.grpo.validate().map_err(|e| ConfigError::Invalid { field: "grpo", message: e.to_string() })?;
        let w = &self.world;
        if !(0.0..=1.0).contains(&w.world.delta) {
            return invalid("world.delta", format!("{} outside [0, 1]", w.world.delta));
        }
        if !(0.0..=1.0).contains(&w.world.skill_low) || !(w.world.skill_low..=1.0).contains(&w.world.skill_high) {
            return invalid("world.skill_low/skill_high", "need 0 <= low <= high <= 1".into());
        }
        if w.world.pool_size == 0 {
            return invalid("world.pool_size", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&w.malformed_rate) {
            return invalid("world.malformed_rate", format!("{} outside [0, 1)", w.malformed_rate));
        }
        if self.agents.judges.is_empty() {
            return invalid("agents.judges", "need at least one judge".into());
        }
        Ok(())
    }

    pub fn pool_path(&self) -> PathBuf {
        if self.diagnosis.pool.is_absolute() {
            self.diagnosis.pool.clone()
        } else {
            self.run.workspace.join(&self.diagnosis.pool)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::CapabilityCategory;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_with("", Vec::new()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.run.iterations, 3);
        assert_eq!(cfg.diagnosis.sample_size, 200);
        assert_eq!(cfg.generation.budget, 4000);
        assert_eq!(cfg.generation.selector.top_k, 3);
        assert_eq!(cfg.grpo.group_size, 8);
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.world.world.categories = vec![CapabilityCategory::Artworks];
        cfg.generation.mixture = MixtureMode::Uniform;
        let back = RunConfig::from_toml_with(&cfg.to_toml(), Vec::new()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn env_overrides_win() {
        let text = "[generation]\nbudget = 100\n";
        let env = vec![
            ("DPE__GENERATION__BUDGET".to_string(), "12".to_string()),
            ("DPE__RUN__MOCK".to_string(), "true".to_string()),
            ("DPE__GENERATION__MIXTURE".to_string(), "uniform".to_string()),
            ("DPE__LEARNABILITY__BAND__LOW".to_string(), "0.25".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = RunConfig::from_toml_with(text, env).unwrap();
        assert_eq!(cfg.generation.budget, 12);
        assert!(cfg.run.mock);
        assert_eq!(cfg.generation.mixture, MixtureMode::Uniform);
        assert_eq!(cfg.learnability.band.low, 0.25);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in ["[generation]\nbudget = 0", "[world]\ndelta = 2.0", "[learnability]\nband = {low = 0.9, high = 0.1}", "[run]\niterations = \"x\""] {
            assert!(RunConfig::from_toml_with(text, Vec::new()).is_err(), "{text}");
        }
        let bad = vec![("DPE__BUDGET".to_string(), "1".to_string())];
        assert!(matches!(RunConfig::from_toml_with("", bad), Err(ConfigError::Env { .. })));
    }
}
