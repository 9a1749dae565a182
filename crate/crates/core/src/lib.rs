//! Semantic search over clinical notes: chunking, embedding, a partitioned
//! filtered vector index, a note hydration store and the governed query
//! engine that ties them together.

pub mod ann;
pub mod chunker;
pub mod embedding;
pub mod ids;
pub mod ingest;
pub mod query;
pub mod store;

pub use ids::{ChunkId, NoteId};
