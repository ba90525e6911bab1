use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("index {index} out of range for {what} of size {bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("injection failed: probe hit rate {hit_rate:.3} after {epochs} epochs ({diagnostics})")]
    InjectionFailure {
        hit_rate: f64,
        epochs: usize,
        diagnostics: String,
    },

    #[error("defense setup failed: {0}")]
    DefenseSetup(String),

    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version: found `{0}`, expected `MLMCKPT v1`")]
    UnsupportedVersion(String),

    #[error("stage `{stage}` requires an artifact produced by `{required}`; run `{required}` first")]
    MissingArtifact { stage: String, required: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
