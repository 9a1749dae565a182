//! Evaluation tooling for the note search stack: multiple-choice retrieval QA
//! with majority voting, a concurrent latency load generator, and the
//! agreement statistics used to compare abstraction methods.

pub mod latency;
pub mod mcqa;
pub mod stats;

use notesearch_core::ann::IndexError;
use notesearch_core::chunker::ChunkError;
use notesearch_core::embedding::EmbedError;
use notesearch_core::query::QueryError;
use notesearch_core::store::StoreError;
use thiserror::Error;

/// Version stamped into every report file this crate writes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("no votes to aggregate")]
    EmptyVotes,
    #[error("invalid benchmark setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
