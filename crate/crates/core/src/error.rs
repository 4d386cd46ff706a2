use thiserror::Error;

use crate::engine::RunCheckpoint;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("boundary construction fault at t={t}: {reason}")]
    Boundary { t: u64, reason: String },

    #[error("conditional distribution at t={t} is unavailable: {reason}")]
    Conditional { t: u64, reason: String },

    #[error("invalid counts: {0}")]
    Counts(String),

    #[error("envelope undefined: {0}")]
    Envelope(String),

    #[error("sampler failure: {0}")]
    Sampler(#[from] SamplerError),

    /// A sampler failed mid-run; the checkpoint holds the last consistent state.
    #[error("run aborted at t={}: {source}", checkpoint.t)]
    Aborted {
        source: SamplerError,
        checkpoint: Box<RunCheckpoint>,
    },

    #[error("no feasible stream count up to {limit}")]
    NoFeasibleN { limit: u64 },

    #[error("enumeration bound exceeded: {0}")]
    Enumeration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures of a bit source.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("failed to spawn external sampler `{command}`: {reason}")]
    Spawn { command: String, reason: String },

    #[error("external sampler timed out after {secs} s waiting on stream {stream}")]
    Timeout { stream: u64, secs: u64 },

    #[error("protocol error on stream {stream}: unexpected reply {line:?}")]
    Protocol { stream: u64, line: String },

    #[error("external sampler exited while serving stream {stream}")]
    ChildExited { stream: u64 },

    #[error("i/o error talking to external sampler: {0}")]
    Io(String),

    #[error("invalid sampler specification: {0}")]
    Spec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
