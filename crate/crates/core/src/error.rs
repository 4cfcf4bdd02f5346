//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} out of range [1, {max}]")]
    TimestepRange { t: usize, max: usize },

    #[error("degenerate reverse step at t={t}: alpha_bar is 1 with nonzero predicted noise")]
    DegenerateStep { t: usize },

    #[error("non-finite value in {component}{}", at_step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        component: &'static str,
        at_step: Option<usize>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 2 for config/usage problems, 3 for
    /// runtime and numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            _ => 3,
        }
    }
}
