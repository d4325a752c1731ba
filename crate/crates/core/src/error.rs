use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty corpus: no trainable vocabulary")]
    EmptyCorpus,

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("softmax over a fully masked input")]
    AllMasked,

    #[error("entity {entity:?} is not a {expected} but is present as a {found}")]
    WrongSide { entity: String, expected: &'static str, found: &'static str },

    #[error("unknown entity {0:?}")]
    UnknownEntity(String),

    #[error("negative sampling failed after {0} attempts")]
    NegativeSampling(usize),

    #[error("roc_auc needs at least one positive and one negative label")]
    SingleClass,

    #[error("nearest-neighbor pool is empty")]
    EmptyPool,

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("model variant mismatch: expected {expected}, found {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
