use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Structural problems with a network's branch graph.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("not a tree: branch {from}-{to} closes a cycle")]
    Cycle { from: i64, to: i64 },
    #[error("disconnected: bus {bus} is not reachable from the slack bus")]
    Disconnected { bus: i64 },
    #[error("orphan bus {bus}: no branch touches it")]
    OrphanBus { bus: i64 },
    #[error("branch {from}-{to} references unknown bus {bus}")]
    UnknownBus { from: i64, to: i64, bus: i64 },
    #[error("branch count {branches} does not match a spanning tree over {buses} buses")]
    EdgeCount { buses: usize, branches: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Topology(#[from] TopologyError),

    #[error("degenerate branch {from}-{to}: zero series impedance")]
    DegenerateBranch { from: i64, to: i64 },

    #[error("unknown bus {0}")]
    UnknownBus(i64),

    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("power flow did not converge")]
    NotConverged,

    #[error("profile error: {0}")]
    Profile(String),

    #[error("environment error: {0}")]
    Environment(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to runtime failures).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Topology(_)
                | Error::DegenerateBranch { .. }
                | Error::UnknownBus(_)
                | Error::Dimension { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
