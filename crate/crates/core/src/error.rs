use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input did not satisfy an operation's shape or range contract.
    #[error("rejected input: {0}")]
    Rejected(String),

    /// An invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Attention was asked to attend over zero keys.
    #[error("attention over an empty key set")]
    EmptyKeys,

    /// Static-pathway K/V do not match the mask stream they are paired with.
    #[error("static cache mismatch: {0}")]
    CacheMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        last_good_checkpoint: Option<PathBuf>,
    },

    /// The sampler produced a non-finite state.
    #[error("sampler diverged at step {step}")]
    SamplerDiverged { step: usize },

    /// A MAC tally overflowed its integer type.
    #[error("MAC counter overflow")]
    CounterOverflow,

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn rejected(msg: impl Into<String>) -> Error {
    Error::Rejected(msg.into())
}
