use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty cluster")]
    EmptyCluster,
    #[error("invalid corruption rate {0}")]
    InvalidRate(f64),
    #[error("need at least two identities with two utterances each")]
    InsufficientIdentities,
    #[error("batch size {batch} exceeds population {population}")]
    BatchLargerThanPopulation { batch: usize, population: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("not a probability distribution")]
    NonDistribution,
    #[error("fewer than {min} distinct points for k = {k}")]
    TooFewDistinctPoints { k: usize, min: usize },
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("too few samples: {got} < {min}")]
    TooFewSamples { got: usize, min: usize },
    #[error("degenerate mixture fit")]
    DegenerateFit,
    #[error("mixture means coincide")]
    DegenerateMeans,
    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("trial list needs at least one target and one non-target")]
    DegenerateTrials,
    #[error("label sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown utterance id {0}")]
    UnknownUtterance(usize),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
