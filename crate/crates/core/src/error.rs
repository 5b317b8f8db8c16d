use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numerical { op: String },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: usize, vocab_size: usize },

    #[error("loss has no supervised positions")]
    EmptyLoss,

    #[error("backward requires a scalar loss, got {len} elements")]
    NotScalar { len: usize },

    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("lambda1 and lambda2 are both zero")]
    BothZero,

    #[error("beam width must be at least 1")]
    BadBeamWidth,

    #[error("search space of {size} sequences exceeds the enumeration limit")]
    SearchSpaceTooLarge { size: u128 },

    #[error("no choices to score")]
    EmptyChoices,

    #[error("length mismatch: {pred} predictions vs {gold} references")]
    LengthMismatch { pred: usize, gold: usize },

    #[error("metric undefined on an empty set")]
    EmptySet,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("schema error in {location}: {detail}")]
    Schema { location: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
