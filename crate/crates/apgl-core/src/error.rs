use thiserror::Error;

/// Errors surfaced by dataset construction, graph building, training and
/// evaluation. Shape mismatches inside the numeric kernels are programming
/// errors and panic instead (with both shapes in the message).
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{count} malformed line(s) rejected in strict mode (first: {first_line})")]
    MalformedInput { count: usize, first_line: String },
    #[error("dataset empty after filtering (min_count={min_count}): {detail}")]
    EmptyAfterFilter { min_count: usize, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("negative sampling impossible: sequence covers all {num_items} items")]
    NegativeSamplingExhausted { num_items: usize },
    #[error("unknown user id {0}")]
    UnknownUser(u32),
    #[error("unusable sequence: {0}")]
    EmptySequence(String),
    #[error("zero-norm row {row} in {what}: cosine undefined")]
    ZeroNormRow { row: usize, what: String },
    #[error("non-finite value in {what} ({detail})")]
    NonFinite { what: &'static str, detail: String },
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("target item {target} is in the exclusion set")]
    TargetExcluded { target: u32 },
    #[error("container format error: {0}")]
    Container(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
