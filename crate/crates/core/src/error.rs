use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed flow record: field `{field}`: {reason}")]
    FlowField { field: &'static str, reason: String },

    #[error("malformed label record: {0}")]
    Label(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("feature vector has {got} entries, model expects {expected}")]
    VocabularyMismatch { expected: usize, got: usize },

    #[error("unknown flow `{0}`")]
    UnknownFlow(String),

    #[error("unknown prediction `{0}`")]
    UnknownPrediction(String),

    #[error("invalid rule: {}", .0.join("; "))]
    InvalidRule(Vec<String>),

    #[error("unknown rule `{0}`")]
    UnknownRule(String),

    #[error("rule `{0}` already exists")]
    DuplicateRule(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FlowField { .. } => "flow_record",
            Error::Label(_) => "label_record",
            Error::Config(_) => "config",
            Error::EmptyTrainingSet => "empty_training_set",
            Error::VocabularyMismatch { .. } => "vocabulary_mismatch",
            Error::UnknownFlow(_) => "unknown_flow",
            Error::UnknownPrediction(_) => "unknown_prediction",
            Error::InvalidRule(_) => "invalid_rule",
            Error::UnknownRule(_) => "unknown_rule",
            Error::DuplicateRule(_) => "duplicate_rule",
            Error::InvalidQuery(_) => "invalid_query",
            Error::Evaluation(_) => "evaluation",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
