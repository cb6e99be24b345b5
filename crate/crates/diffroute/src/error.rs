//! Crate-wide error type.
//!
//! Errors are split into two broad classes that the command line maps to
//! distinct exit codes: problems with user input (bad files, bad arguments,
//! infeasible data) and runtime failures (numerical blow-ups, corrupt
//! checkpoints, dimension mismatches).

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Instance data violates a model invariant (coordinates, demands, sizes).
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    /// A candidate solution fails feasibility checks against its instance.
    #[error("infeasible solution: {0}")]
    InfeasibleSolution(String),

    /// Malformed benchmark or dataset file; includes the offending location.
    #[error("parse error in {file} line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    /// Argument combinations or values the API refuses to accept.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A metric or quantity is undefined for the given input.
    #[error("undefined value: {0}")]
    Undefined(String),

    /// Shapes of tensors or matrices do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Checkpoint archive is unreadable or missing a required section.
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    /// Training produced a non-finite quantity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Wrapped I/O failure with the path that triggered it.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialisation failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// TOML configuration failure.
    #[error("config error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from user-supplied input rather than an
    /// internal runtime failure; the CLI uses this to pick its exit code.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidInstance(_)
                | Error::InfeasibleSolution(_)
                | Error::Parse { .. }
                | Error::InvalidArgument(_)
                | Error::Io { .. }
                | Error::Toml(_)
        )
    }
}
