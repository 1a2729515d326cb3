use std::fmt;

use thiserror::Error;

use crate::llm::LlmError;

/// Pipeline phase tag attached to errors that abort a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Extraction,
    Retrieval,
    Analysis,
    Render,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Phase::Extraction => "phase1-extraction",
            Phase::Retrieval => "phase2-retrieval",
            Phase::Analysis => "phase3-analysis",
            Phase::Render => "phase4-render",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Every parsing fallback was exhausted; `raw` is the untouched model output.
    #[error("could not parse structured output: {reason}")]
    Parse { reason: String, raw: String },

    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error("all {attempted} queries failed")]
    RetrievalEmpty {
        attempted: usize,
        failures: Vec<String>,
    },

    #[error("{phase} aborted: {reason}")]
    PhaseAbort { phase: Phase, reason: String },

    #[error("report is missing required module `{0}`")]
    MissingModule(&'static str),

    #[error("dangling citation index [{0}]")]
    DanglingCitation(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
