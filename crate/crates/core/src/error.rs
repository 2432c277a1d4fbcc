use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants are kept distinct where callers branch on them: tree decoding
/// separates `Shape` from `InvalidTree`, and loading separates `Parse` (bad
/// JSON) from `Schema` (well-formed JSON missing a field).
#[derive(Debug, Error)]
pub enum SgnError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema error in record {record}: {message}")]
    Schema { record: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("capacity exceeded: {nodes} nodes > maximum {max}")]
    Capacity { nodes: usize, max: usize },

    #[error("not comparable: {0}")]
    Comparability(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown key: {0}")]
    Lookup(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SgnError>;
