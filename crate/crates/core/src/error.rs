use std::path::PathBuf;

use crate::join_structs::BufferStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("storage error: {0}")]
    Io(#[from] std::io::Error),

    #[error("master file would be {requested} bytes, above the configured maximum of {max}")]
    Capacity { requested: u64, max: u64 },

    #[error("{path}: not a master file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: corrupted master file: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("master relation is empty")]
    EmptyRelation,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient memory: {component} needs {needed} bytes but only {available} remain of the budget")]
    InsufficientMemory {
        component: &'static str,
        needed: u64,
        available: u64,
    },

    #[error("illegal disk-buffer transition {from:?} -> {to:?}")]
    IllegalTransition { from: BufferStatus, to: BufferStatus },

    #[error("engine shutdown timed out; still running: {stuck}")]
    ShutdownTimeout { stuck: String },

    #[error("worker failed: {0}")]
    Worker(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}
