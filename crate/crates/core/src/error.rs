//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation precondition (non-finite values, bad
    /// lengths, non-positive temperature, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is structurally valid but numerically degenerate (zero-norm
    /// vector where a direction is required).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Tensor shapes are incompatible for the requested graph operation.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A text or video embedding collapsed to (near) zero before
    /// normalization.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Finite-difference probing hit a non-finite function value.
    #[error("probe failure: {0}")]
    ProbeFailure(String),

    /// The corpus does not carry the ground truth a component needs.
    #[error("unsupported corpus: {0}")]
    UnsupportedCorpus(String),

    /// On-disk corpus data is missing, truncated, or inconsistent with its
    /// manifest.
    #[error("corpus integrity: {0}")]
    CorpusIntegrity(String),

    /// The corpus manifest itself is invalid.
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    /// Training or model configuration is inconsistent with the data.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A corpus handed to the retrieval stage is unusable (duplicate ids,
    /// empty store, ...).
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    /// Evaluation input is missing ground truth.
    #[error("invalid eval: {0}")]
    InvalidEval(String),

    /// A cost-model spec references an unknown primitive.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A gradient turned non-finite; the step is aborted rather than
    /// silently clamped.
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable class name, used by the CLI for one-line
    /// error reporting and exit codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::InvalidShape(_) => "invalid-shape",
            Error::DegenerateEmbedding(_) => "degenerate-embedding",
            Error::ProbeFailure(_) => "probe-failure",
            Error::UnsupportedCorpus(_) => "unsupported-corpus",
            Error::CorpusIntegrity(_) => "corpus-integrity",
            Error::InvalidManifest(_) => "invalid-manifest",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidCorpus(_) => "invalid-corpus",
            Error::InvalidEval(_) => "invalid-eval",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
