use std::path::PathBuf;

use mbtensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("placeholder {0:?} has no bound embedding")]
    UnboundPlaceholder(String),
    #[error("prompt has {len} tokens, the maximum is {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("embedding has zero norm; its direction is undefined")]
    ZeroNorm,
    #[error("invalid image: {0}")]
    Image(String),
    #[error("invalid dataset request: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported {kind} format version {found} (expected {expected})")]
    Version { kind: &'static str, found: u32, expected: u32 },
    #[error("validation failed: {invariant}: {detail}")]
    Validation { invariant: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("region {region} is empty at {height}×{width} resolution")]
    EmptyRegion { region: String, height: usize, width: usize },
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    Checksum { what: String, expected: String, found: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn validation(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Validation {
            invariant,
            detail: detail.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::UnknownWord(_) | Error::UnboundPlaceholder(_) | Error::PromptTooLong { .. } => "prompt",
            Error::ZeroNorm => "zero_norm",
            Error::Image(_) => "image",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
            Error::Version { .. } => "version",
            Error::Validation { .. } => "validation",
            Error::Config(_) => "config",
            Error::Layout(_) | Error::EmptyRegion { .. } => "layout",
            Error::Diverged { .. } => "diverged",
            Error::Checksum { .. } => "checksum",
        }
    }
}
