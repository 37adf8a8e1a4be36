use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reranker stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("input too long: {0}")]
    InputTooLong(String),

    #[error("vocab error: token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("label error: {0}")]
    Label(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("training diverged at step {step}: non-finite {component}")]
    Divergence { step: usize, component: String },

    #[error("passage {index}: {source}")]
    Passage {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("inapplicable: {0}")]
    Inapplicable(String),

    #[error("audit failure: {0}")]
    AuditFailure(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::DegenerateVector(_) => "degenerate-vector",
            Error::Evaluation(_) => "evaluation",
            Error::InputTooLong(_) => "input-too-long",
            Error::Vocab { .. } => "vocab",
            Error::Index(_) => "index",
            Error::EmptyCandidates => "empty-candidates",
            Error::Label(_) => "label",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Passage { .. } => "passage",
            Error::Inapplicable(_) => "inapplicable",
            Error::AuditFailure(_) => "audit-failure",
            Error::Io { .. } => "io",
        }
    }
}
