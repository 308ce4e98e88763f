use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no lung voxels")]
    NoLungVoxels,
    #[error("n < k: {n} samples for {k} components")]
    TooFewSamples { n: usize, k: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("need both labels present, found only label {0}")]
    SingleClass(u8),
    #[error("precision undefined: no positive predictions")]
    NoPositivePredictions,
    #[error("duplicate key ({patient_id}, {patch_index})")]
    DuplicateKey { patient_id: String, patch_index: u32 },
    #[error("training diverged at epoch {epoch} (last finite loss {last_finite_loss})")]
    Diverged {
        epoch: usize,
        last_finite_loss: f64,
        /// Parameters before the step that produced a non-finite loss.
        last_state: Box<crate::flow::NfModel<f64>>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether the error stems from the environment (files, numerical
    /// breakdown) rather than from inputs failing validation.
    pub fn is_runtime(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Diverged { .. } => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
