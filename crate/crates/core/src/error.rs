//! Top-level error with one family per process exit code.

use std::path::PathBuf;

use thiserror::Error;

use crate::agents::AgentError;
use crate::analysis::AnalysisError;
use crate::config::ConfigError;
use crate::diagnosis::DiagnosisError;
use crate::grpo::GrpoError;
use crate::learnability::LearnabilityError;
use crate::questioner::QuestionerError;
use crate::quota::QuotaError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum DpeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input {path}: {detail}")]
    MissingInput { path: PathBuf, detail: String },
    #[error("client failure: {0}")]
    Client(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Store(StoreError),
    #[error("interrupted during {0}")]
    Interrupted(String),
}

impl DpeError {
    pub const EXIT_OK: i32 = 0;
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_MISSING_INPUT: i32 = 3;
    pub const EXIT_CLIENT: i32 = 4;
    pub const EXIT_INVARIANT: i32 = 5;

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => Self::EXIT_CONFIG,
            Self::MissingInput { .. } => Self::EXIT_MISSING_INPUT,
            Self::Client(_) => Self::EXIT_CLIENT,
            Self::Invariant(_) => Self::EXIT_INVARIANT,
            Self::Store(e) if e.is_not_found() => Self::EXIT_MISSING_INPUT,
            Self::Store(StoreError::Io { .. }) | Self::Interrupted(_) => 1,
            Self::Store(_) => Self::EXIT_INVARIANT,
        }
    }
}

impl From<StoreError> for DpeError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::MissingInput { path, detail: source.to_string() }
            }
            other => Self::Store(other),
        }
    }
}

impl From<AgentError> for DpeError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(m) => Self::Config(ConfigError::Invalid { field: "agents", message: m }),
            other => Self::Client(other.to_string()),
        }
    }
}

impl From<DiagnosisError> for DpeError {
    fn from(e: DiagnosisError) -> Self {
        match e {
            DiagnosisError::Store(s) => s.into(),
            DiagnosisError::InvalidBands(m) => Self::Config(ConfigError::Invalid { field: "diagnosis.bands", message: m }),
            DiagnosisError::ZeroSample => Self::Config(ConfigError::Invalid { field: "diagnosis.sample_size", message: e.to_string() }),
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<QuestionerError> for DpeError {
    fn from(e: QuestionerError) -> Self {
        match e {
            QuestionerError::Agent(a) => a.into(),
            QuestionerError::Store(s) => s.into(),
            QuestionerError::Quota(q) => q.into(),
            QuestionerError::Cancelled => Self::Interrupted("generation".into()),
            other => Self::Client(other.to_string()),
        }
    }
}

impl From<QuotaError> for DpeError {
    fn from(e: QuotaError) -> Self {
        match e {
            QuotaError::ZeroBudget => Self::Config(ConfigError::Invalid { field: "generation.budget", message: e.to_string() }),
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<LearnabilityError> for DpeError {
    fn from(e: LearnabilityError) -> Self {
        match e {
            LearnabilityError::BadBand(..) | LearnabilityError::BadBeta(_) | LearnabilityError::NoRollouts => {
                Self::Config(ConfigError::Invalid { field: "learnability", message: e.to_string() })
            }
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<GrpoError> for DpeError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Config(m) => Self::Config(ConfigError::Invalid { field: "grpo", message: m }),
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<AnalysisError> for DpeError {
    fn from(e: AnalysisError) -> Self {
        Self::Invariant(e.to_string())
    }
}
