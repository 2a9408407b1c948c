use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical quantity outside its admissible range (e.g. non-positive baseline).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input values that violate a documented contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("duplicate scene id `{0}`")]
    DuplicateScene(String),

    #[error("missing sidecar for {0}")]
    MissingSidecar(PathBuf),

    /// Malformed or inconsistent on-disk data.
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("zero standard deviation in band {0}")]
    ZeroStd(usize),

    /// A training or evaluation run that could not complete.
    #[error("run failed: {0}")]
    Run(String),

    #[error("io error at {path}: {source}")]
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

    pub fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by user configuration rather than data or I/O.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Schema(_) | Error::Validation(_))
    }

    /// True for errors caused by missing or malformed input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::DuplicateScene(_) | Error::MissingSidecar(_) | Error::ZeroStd(_) | Error::Io { .. }
        )
    }
}
