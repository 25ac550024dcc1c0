use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("kernel size {size} too small for radius {radius}: need an odd size >= {required}")]
    KernelTooSmall {
        size: usize,
        radius: f32,
        required: usize,
    },

    #[error("kernel size must be odd, got {0}")]
    KernelSizeEven(usize),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("value out of range in {context}: {value} outside [{lo}, {hi}]")]
    OutOfRange {
        context: String,
        value: f32,
        lo: f32,
        hi: f32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at iteration {iteration} (batch {batch_ids:?})")]
    NonFiniteLoss {
        iteration: usize,
        batch_ids: Vec<String>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
