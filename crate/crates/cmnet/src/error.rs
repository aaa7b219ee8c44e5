use thiserror::Error;

/// Error type shared across the crate.
///
/// The variant split mirrors how the CLI maps failures to exit codes:
/// configuration/usage problems exit with 2, runtime failures with 1.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration: bad architecture switches, unsupported sizes,
    /// out-of-range hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data handed to an operation (shape mismatch, non-finite
    /// values, out-of-range labels).
    #[error("input error: {0}")]
    Input(String),

    /// Weight table loading failed (missing key, shape mismatch).
    #[error("load error: {0}")]
    Load(String),

    /// Dataset ingestion / sampling problems.
    #[error("data error: {0}")]
    Data(String),

    /// Evaluation-time failures (class count mismatch, label map holes).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training aborted (e.g. non-finite loss).
    #[error("training error: {0}")]
    Train(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by a bad configuration or usage, as opposed to
    /// runtime failures. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
