use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("degenerate pair: encodings differ by {distance:e} (<= eps)")]
    DegeneratePair { distance: f64 },

    #[error("insufficient pairs: needed {needed}, only {usable} usable")]
    InsufficientPairs { needed: usize, usable: usize },

    #[error("cannot split stratum (speaker {speaker}, emotion {emotion}): {pairs} pair(s), need >= 2")]
    Split {
        speaker: usize,
        emotion: usize,
        pairs: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch of size {got} too small, need >= {needed}")]
    InsufficientBatch { got: usize, needed: usize },

    #[error("token id {id} out of range for vocab {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("ground truth unavailable: {0}")]
    OracleUnavailable(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerics or I/O.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Split { .. } | Error::Json(_))
    }

    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidMask { .. } => "invalid_mask",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::DegeneratePair { .. } => "degenerate_pair",
            Error::InsufficientPairs { .. } => "insufficient_pairs",
            Error::Split { .. } => "split",
            Error::EmptyBatch => "empty_batch",
            Error::InsufficientBatch { .. } => "insufficient_batch",
            Error::Vocab { .. } => "vocab",
            Error::Divergence { .. } => "divergence",
            Error::OracleUnavailable(_) => "oracle_unavailable",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
