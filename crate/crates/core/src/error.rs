use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing counterpart for {0}")]
    MissingPair(PathBuf),

    #[error("label {value} at ({row}, {col}) in {path} is not below the class count {num_classes}")]
    LabelOutOfRange {
        path: PathBuf,
        row: usize,
        col: usize,
        value: u8,
        num_classes: usize,
    },

    #[error("unsupported mask {path}: {reason}")]
    MaskFormat { path: PathBuf, reason: String },

    #[error("duplicate sample id {0}")]
    DuplicateId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot rendering: {0}")]
    Plot(String),

    #[error("tiff encoding: {0}")]
    Tiff(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
