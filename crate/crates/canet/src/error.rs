use std::fmt;
use std::io;
use std::path::PathBuf;

use crate::DatasetId;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, the model, the data pipeline, and I/O.
#[derive(Debug)]
pub enum Error {
    /// An operation received tensors with incompatible or invalid dimensions.
    Shape { op: &'static str, detail: String },
    /// A scalar argument violated an operation precondition.
    InvalidArgument { op: &'static str, detail: String },
    /// The dataset id is not registered in the model or bank.
    UnknownDataset(DatasetId),
    /// Attempted to register a dataset id twice.
    DuplicateDataset(DatasetId),
    /// Eval-mode normalization requested before any running statistics exist.
    MissingRunningStats(DatasetId),
    /// `backward` was called on a tape that has already been consumed.
    TapeConsumed,
    /// `backward` was called on a value that was not recorded on the tape.
    NotRecorded,
    /// Checked mode detected a non-finite value in an op output.
    NonFinite { op: &'static str },
    /// An optimizer step found a trainable parameter without a gradient.
    MissingGradient,
    /// Training aborted because the loss became non-finite.
    NanLoss { epoch: usize, batch: usize },
    /// A training or evaluation call received no samples.
    EmptyDataset,
    /// Filesystem failure, with the path involved.
    Io { path: PathBuf, source: io::Error },
    /// A file (checkpoint, netpbm image, manifest) failed to parse.
    Format { context: String, detail: String },
    /// Invalid experiment or model configuration.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::UnknownDataset(id) => write!(f, "unknown dataset id: {id}"),
            Error::DuplicateDataset(id) => write!(f, "dataset id already registered: {id}"),
            Error::MissingRunningStats(id) => write!(
                f,
                "eval-mode normalization for dataset {id} before any running statistics exist"
            ),
            Error::TapeConsumed => write!(f, "backward called twice on a consumed tape"),
            Error::NotRecorded => write!(f, "backward target was not recorded on the active tape"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value in output"),
            Error::MissingGradient => {
                write!(f, "sgd step: trainable parameter has no populated gradient")
            }
            Error::NanLoss { epoch, batch } => {
                write!(f, "loss became non-finite at epoch {epoch}, batch {batch}")
            }
            Error::EmptyDataset => write!(f, "dataset contains no samples"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Format { context, detail } => write!(f, "{context}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { context: context.into(), detail: detail.into() }
    }

    /// Process exit code for the CLI: 2 for usage/config/format errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format { .. } => 2,
            _ => 1,
        }
    }
}
