use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("prox inversion did not converge after {iterations} iterations (best residual {residual:e})")]
    InversionFailed { iterations: usize, residual: f64 },

    #[error("malformed image header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("truncated payload at byte {offset}: expected {expected} {unit}, found {actual}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        actual: usize,
        /// "bytes" for binary encodings, "samples" for ASCII ones.
        unit: &'static str,
    },

    #[error("unsupported maxval {maxval} at byte {offset} (only 255 is supported)")]
    UnsupportedMaxval { offset: usize, maxval: u32 },

    #[error("malformed tensor: {0}")]
    MalformedTensor(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("empty data source: {0}")]
    EmptySource(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numerical (non-finite loss, failed inversion).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::TrainingAborted { .. } | Error::InversionFailed { .. }
        )
    }

    /// Whether the failure came from reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedHeader { .. }
                | Error::TruncatedPayload { .. }
                | Error::UnsupportedMaxval { .. }
                | Error::MalformedTensor(_)
                | Error::Checkpoint(_)
                | Error::UnsupportedVersion { .. }
        )
    }
}
