use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule never reads the whole source (no cutoff)")]
    NoCutoff,

    #[error("schedule is not monotone non-decreasing at step {step}")]
    NonMonotone { step: usize },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("degenerate trace: no step with positive wait")]
    DegenerateTrace,

    #[error("length ratio r must be positive, got {0}")]
    InvalidRatio(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("empty attention support in row {row}")]
    EmptyAttentionSupport { row: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("prefix length {g} out of range 1..={len}")]
    PrefixOutOfRange { g: usize, len: usize },

    #[error("step {step} has g(t)=0 but zero-source mode was not requested")]
    NoSourceContext { step: usize },

    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfVocab { id: u32, size: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}, sentence {sentence}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        sentence: usize,
    },

    #[error("gradient check failed: relative error {error:.3e} exceeds {tolerance:.0e}")]
    GradientMismatch { error: f64, tolerance: f64 },

    #[error("inconsistent role orders: {0}")]
    RoleOrder(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures caused by numerics (non-finite values) rather than
    /// bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::GradientMismatch { .. })
    }
}
