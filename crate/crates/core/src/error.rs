use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("tape usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label spaces differ: source model has {source_classes} classes, target model has {target_classes}")]
    LabelSpace {
        source_classes: usize,
        target_classes: usize,
    },

    #[error("the target model classifies no test sample correctly; nothing to attack")]
    EmptySubset,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("transferability is undefined when the white-box adversarial accuracy is zero")]
    UndefinedGamma,

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Failures while reading or writing a `TLABCKPT` checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },

    #[error("unknown architecture id {0:?}")]
    UnknownArch(String),

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

/// Failures while parsing IDX image/label files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad IDX magic: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("IDX data truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
}
