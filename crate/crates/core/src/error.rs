use std::fmt;

/// Where a solver failure happened, when known.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverSite {
    pub path: Option<u64>,
    pub step: Option<u64>,
}

impl fmt::Display for SolverSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.path, self.step) {
            (Some(p), Some(s)) => write!(f, "path {p}, step {s}"),
            (None, Some(s)) => write!(f, "step {s}"),
            (Some(p), None) => write!(f, "path {p}"),
            (None, None) => write!(f, "unknown site"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("solver failure at {site}: {reason} (iterations {iterations}, last residual {residual:e})")]
    Solver {
        site: SolverSite,
        reason: String,
        iterations: usize,
        residual: f64,
    },

    #[error("ergodicity check failed: {0}")]
    Ergodicity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Attach a step index to a solver failure; other variants pass through.
    pub fn at_step(self, step: u64) -> Self {
        match self {
            Error::Solver { mut site, reason, iterations, residual } => {
                site.step = Some(step);
                Error::Solver { site, reason, iterations, residual }
            }
            other => other,
        }
    }

    /// Attach a path index to a solver failure; other variants pass through.
    pub fn on_path(self, path: u64) -> Self {
        match self {
            Error::Solver { mut site, reason, iterations, residual } => {
                site.path = Some(path);
                Error::Solver { site, reason, iterations, residual }
            }
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Solver { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
