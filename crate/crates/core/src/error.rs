use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid score matrix: {0}")]
    InvalidScores(String),

    #[error("invalid pseudo labels: {0}")]
    InvalidPseudoLabels(String),

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("class index {0} is the background row")]
    BackgroundRow(usize),

    #[error("no proposals")]
    NoProposals,

    #[error("no class has ground truth; mAP is undefined")]
    NoIncludedClasses,

    #[error("model has no {0} head")]
    MissingHead(&'static str),

    #[error("unknown experiment `{name}`; registered: {registered}")]
    UnknownExperiment { name: String, registered: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
