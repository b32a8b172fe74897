use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the experiment harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] wsnn_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss or activation.
    #[error("numeric abort at epoch {epoch}, batch {batch} (lr {lr:e}): {detail}")]
    NumericAbort {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },

    #[error("{path}: not a checkpoint (bad magic)")]
    CheckpointMagic { path: PathBuf },

    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: checkpoint integrity check failed (crc {stored:08x} != {computed:08x})")]
    CheckpointCrc { path: PathBuf, stored: u32, computed: u32 },

    #[error("{path}: malformed checkpoint: {reason}")]
    CheckpointFormat { path: PathBuf, reason: String },

    #[error("checkpoint does not fit the model: {0}")]
    CheckpointMismatch(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for numeric aborts,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(wsnn_core::Error::Config(_)) => 2,
            Self::NumericAbort { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
