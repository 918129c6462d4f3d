//! Crate-wide error type. Fallible operations return [`Result`]; conditions
//! that indicate a bug in the caller (shape mismatches between tensors that
//! the type system cannot see, indexing past a grid) panic instead.

use std::path::PathBuf;

/// Errors surfaced by world generation, rendering, sampling, data I/O,
/// and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Procedural generation could not satisfy its postconditions within
    /// the retry budget (e.g. object placement kept disconnecting rooms).
    #[error("world generation failed: {0}")]
    WorldGen(String),

    /// A pose or point fell outside the world grid or into occupied space.
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An argument violates an operation's contract (empty batch, fraction
    /// outside (0, 1], mismatched embedding counts, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A binary file did not match the expected layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Sampling could not produce the requested structure (e.g. no
    /// reachable target viewpoint within range).
    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
