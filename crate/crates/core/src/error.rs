use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config value out of range for `{key}`: {reason}")]
    OutOfRange { key: String, reason: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss vector has zero norm")]
    DegenerateLoss,

    #[error("current model coincides with the anchor model")]
    DegenerateAnchor,

    #[error("no basis vector survived the dependence tolerance")]
    EmptyBasis,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at round {round}: {what}")]
    Diverged { round: usize, what: String },

    #[error("{what} is empty")]
    Empty { what: &'static str },

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("sample count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed model file {path}: {detail}")]
    BadModelFile { path: PathBuf, detail: String },

    #[error("malformed round log line {line}: {detail}")]
    BadRoundLog { line: usize, detail: String },

    #[error("run aborted at round {round}: {source}")]
    RoundAbort {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingKey(_)
                | Error::UnknownKey(_)
                | Error::OutOfRange { .. }
                | Error::UnknownVariant(_)
        )
    }
}
