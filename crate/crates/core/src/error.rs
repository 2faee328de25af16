use std::path::PathBuf;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("dataset split `{0}` is empty")]
    EmptySplit(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("failed to load model {path}: {message}")]
    ModelLoad { path: PathBuf, message: String },
    #[error("model outputs do not match: {0}")]
    OutputMismatch(String),
    #[error("model channel counts do not match: {0}")]
    ChannelMismatch(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("attention logits are not finite (feature blow-up)")]
    OverflowGuard,
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("unsupported container version or layout: {0}")]
    VersionMismatch(String),
    #[error("bank was built with a different configuration: expected {expected}, found {found}")]
    ConfigFingerprintMismatch { expected: String, found: String },
    #[error("labels contain a single class; metric is undefined")]
    DegenerateLabels,
    #[error("malformed metadata: {0}")]
    Metadata(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 2 for configuration and model
    /// problems, 1 for data and evaluation problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::ModelLoad { .. }
            | Error::OutputMismatch(_)
            | Error::ChannelMismatch(_)
            | Error::ConfigFingerprintMismatch { .. }
            | Error::VersionMismatch(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
