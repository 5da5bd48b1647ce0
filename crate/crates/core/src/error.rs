use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the capture-to-verdict pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("unknown skill `{0}`")]
    UnknownSkill(String),

    #[error("unanchored record `{record_id}`: missing {missing} event")]
    UnanchoredRecord { record_id: String, missing: String },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("non-finite feature {value} in group `{group}` at index {index}")]
    NonFiniteFeature {
        group: &'static str,
        index: usize,
        value: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cycle {0} has no fitted statistics")]
    UnknownCycle(u32),

    #[error("leakage guard: {0}")]
    Leakage(String),

    #[error("need at least two classes, found {0}")]
    SingleClass(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class set mismatch: {0}")]
    ClassMismatch(String),

    #[error("symbol `{0}` is outside the declared alphabet")]
    UnknownSymbol(String),

    #[error("row {row} of the confusion matrix is not stochastic (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("survey inconclusive: {0}")]
    SurveyInconclusive(String),

    #[error("missing condition `{condition}` for carrier {carrier_mhz} MHz")]
    MissingCondition { carrier_mhz: f64, condition: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::UnknownSkill(_) => "unknown_skill",
            Error::UnanchoredRecord { .. } => "unanchored_record",
            Error::Parse { .. } => "parse",
            Error::ManifestMismatch(_) => "manifest_mismatch",
            Error::NonFiniteFeature { .. } => "non_finite_feature",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::UnknownCycle(_) => "unknown_cycle",
            Error::Leakage(_) => "leakage",
            Error::SingleClass(_) => "single_class",
            Error::Empty(_) => "empty",
            Error::ClassMismatch(_) => "class_mismatch",
            Error::UnknownSymbol(_) => "unknown_symbol",
            Error::NotStochastic { .. } => "not_stochastic",
            Error::SurveyInconclusive(_) => "survey_inconclusive",
            Error::MissingCondition { .. } => "missing_condition",
            Error::Schema(_) => "schema",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
