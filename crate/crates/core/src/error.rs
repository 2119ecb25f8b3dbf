use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("tokenization error: out-of-vocabulary words {0:?}")]
    OutOfVocabulary(Vec<String>),

    #[error("capacity error: sequence of {len} tokens exceeds max_seq {max}")]
    Capacity { len: usize, max: usize },

    #[error("{stage} sampler diverged at step {step}")]
    SamplerDivergence { stage: &'static str, step: usize },

    #[error("gradient oracle failure: non-finite objective at input {input}, index {index}")]
    OracleFailure { input: usize, index: usize },

    #[error("non-finite loss at step {step} (batch fingerprint {fingerprint:016x})")]
    NonFiniteLoss { step: u64, fingerprint: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_)
            | Error::OutOfVocabulary(_)
            | Error::Capacity { .. }
            | Error::Checkpoint(_)
            | Error::Generation(_)
            | Error::Io(_) => 3,
            Error::SamplerDivergence { .. }
            | Error::OracleFailure { .. }
            | Error::NonFiniteLoss { .. } => 4,
            Error::Shape { .. } => 2,
        }
    }
}
