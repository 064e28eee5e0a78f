use std::path::PathBuf;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty conversation `{0}`")]
    EmptyConversation(String),

    #[error("label `{label}` is not in the label space of `{dataset}`")]
    LabelOutsideSpace { dataset: String, label: String },

    #[error("dataset `{dataset}` has no mapping for label `{label}`")]
    UnmappedLabel { dataset: String, label: String },

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid conversation `{id}`: {message}")]
    InvalidConversation { id: String, message: String },

    #[error("duplicate conversation id `{0}`")]
    DuplicateConversation(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("label spaces differ: {0}")]
    LabelSpaceMismatch(String),

    #[error("invalid ratio {0}: must lie in (0, 1]")]
    InvalidRatio(String),

    #[error("target index {index} out of range for conversation `{conversation_id}` of length {len}")]
    TargetOutOfRange {
        conversation_id: String,
        index: usize,
        len: usize,
    },

    #[error("unknown key element `{0}`")]
    UnknownElement(String),

    #[error("unknown template variant `{0}`")]
    UnknownVariant(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("irreducible prompt: {tokens} tokens with empty history exceeds budget {budget}")]
    IrreduciblePrompt { tokens: usize, budget: usize },

    #[error("empty characteristic")]
    EmptyCharacteristic,

    #[error("missing characteristic records: {}", format_gaps(.0))]
    MissingRecords(Vec<(String, usize)>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("mismatched reports: {0}")]
    MismatchedReports(String),

    #[error("insufficient pairs for significance test: {0} (need at least 2)")]
    InsufficientPairs(usize),

    #[error("missing score for dataset `{dataset}` at ratio {ratio}")]
    MissingCell { dataset: String, ratio: String },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure originates in a model backend rather than the data.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend(_))
    }
}

fn format_gaps(gaps: &[(String, usize)]) -> String {
    let shown: Vec<String> = gaps.iter().take(10).map(|(c, i)| format!("({c}, {i})")).collect();
    if gaps.len() > shown.len() {
        format!("{} and {} more", shown.join(", "), gaps.len() - shown.len())
    } else {
        shown.join(", ")
    }
}
