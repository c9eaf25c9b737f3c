//! Crate-wide error type and the process exit-code contract.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: L2 norm {norm:.3e} is below {min:.3e}")]
    DegenerateVector { norm: f64, min: f64 },

    #[error("KL divergence undefined: p[{index}] = {p} but q[{index}] = 0")]
    DivergenceUndefined { index: usize, p: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("key norm {norm} deviates from unit by more than {tol:.1e}")]
    NotUnitNorm { norm: f64, tol: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("no negative keys available: {0}")]
    NoNegatives(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic bytes, not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: malformed file: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl Error {
    /// Wrap an I/O error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config/usage, 3 I/O, 4 training, 5 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::DegenerateVector { .. }
            | Error::DivergenceUndefined { .. }
            | Error::InvalidConfig(_)
            | Error::InvalidClass { .. }
            | Error::NotUnitNorm { .. }
            | Error::InvalidState(_)
            | Error::ShapeMismatch(_) => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. } => 3,
            Error::NoNegatives(_) | Error::TrainingDiverged { .. } => 4,
            Error::VerificationFailed(_) => 5,
        }
    }
}
