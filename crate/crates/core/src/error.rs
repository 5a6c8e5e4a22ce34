use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logit row")]
    EmptyLogitRow,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value {value} of variable {var} is outside [0, {card})")]
    OutOfRange { var: usize, value: usize, card: usize },
    #[error("support too large: {size} outcomes exceeds budget {budget}")]
    SupportTooLarge { size: u128, budget: u128 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("RLOO requires at least two samples")]
    RlooTooFewSamples,
    #[error("IndeCateR requires independent factors")]
    NotIndependent,
    #[error("Gumbel-Softmax requires a relaxed function")]
    NoRelaxation,
    #[error("function has zero derivative almost everywhere")]
    ZeroDerivative,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("not an IDX {0} file")]
    BadMagic(&'static str),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
