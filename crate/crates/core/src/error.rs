use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
///
/// Display strings are stable machine-readable codes; tests and the CLI
/// match on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-logits")]
    EmptyLogits,
    #[error("non-finite-objective")]
    NonFiniteObjective,
    #[error("non-finite-values")]
    NonFiniteValues,
    #[error("shape-mismatch: {0}")]
    Shape(String),

    #[error("empty-codebook")]
    EmptyCodebook,
    #[error("invalid-features")]
    InvalidFeatures,
    #[error("decoder-shape")]
    DecoderShape,
    #[error("degenerate-projection")]
    DegenerateProjection,
    #[error("mpq-diverged")]
    MpqDiverged,

    #[error("unknown-token")]
    UnknownToken,
    #[error("codebook-consumed")]
    CodebookConsumed,
    #[error("pretrain-diverged")]
    PretrainDiverged,

    #[error("decode-failure")]
    DecodeFailure,
    #[error("invalid-distribution")]
    InvalidDistribution,
    #[error("empty-catalog")]
    EmptyCatalog,

    #[error("incomplete-path")]
    IncompletePath,
    #[error("no-category")]
    NoCategory,
    #[error("empty-window")]
    EmptyWindow,

    #[error("pars-diverged")]
    ParsDiverged,

    #[error("empty-split")]
    EmptySplit,
    #[error("empty-corpus")]
    EmptyCorpus,
    #[error("incompatible-checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checksum-failed")]
    ChecksumFailed,
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("invalid-config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
