use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported transform length {0} (must be a power of two)")]
    UnsupportedLength(usize),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("PAPR undefined for an all-zero signal")]
    UndefinedPapr,

    #[error("empty sample set")]
    EmptySamples,

    #[error("degenerate constellation: {0}")]
    Degenerate(String),

    #[error("non-finite value at step {step} in {what}")]
    NonFinite { step: usize, what: String },

    #[error("training diverged at step {step} (phase {phase}): loss {loss} vs initial {initial}")]
    Diverged {
        step: usize,
        phase: u8,
        loss: f64,
        initial: f64,
    },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint error at byte offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
