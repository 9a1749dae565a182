//! Partitioned approximate nearest-neighbor index over unit vectors.
//!
//! Vectors are assigned to their `spill` nearest centroids (spherical
//! k-means). A query scans the `nprobe` partitions whose centroids have the
//! highest dot product with it, skips entries failing the filter before
//! scoring them, keeps the best `rescore_budget` candidates by quantized score
//! and rescores those at full precision. Final order is exact score
//! descending, then ascending chunk id.

mod disk;
pub mod filter;
mod format;
mod index;
pub mod kmeans;
pub mod quantize;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use disk::DiskIndex;
pub use filter::{AttributeSet, CategoricalClause, CategoricalField, Field, FilterError, FilterSpec, NumericField, NumericRange};
pub use format::{load, save, FORMAT_VERSION, MAGIC};
pub use index::PartitionedIndex;
pub use kmeans::train_partitions;
pub use quantize::{asymmetric_dot, dequantize, quantize, Quantization, ScalarCode};

use crate::embedding::EmbeddingVector;
use crate::ids::{ChunkId, NoteId};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index has not been trained")]
    Untrained,
    #[error("index already holds entries; training would orphan them")]
    AlreadyPopulated,
    #[error("invalid index config: {0}")]
    InvalidConfig(String),
    #[error("training sample is empty")]
    EmptySample,
    #[error("cannot train {requested} partitions from {available} sample vectors")]
    TooManyPartitions { requested: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate chunk ids: {}", format_ids(.0))]
    DuplicateChunkIds(Vec<ChunkId>),
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("index file is truncated")]
    Truncated,
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(&'static str),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

fn format_ids(ids: &[ChunkId]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub num_partitions: usize,
    pub nprobe: usize,
    /// Partitions each vector is assigned to: 1 for plain IVF, 2 for spilled assignment.
    pub spill: usize,
    /// Candidates kept from the quantized scan for exact rescoring. Raised to `k` when smaller.
    pub rescore_budget: usize,
    pub quantization: Quantization,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { num_partitions: 64, nprobe: 8, spill: 2, rescore_budget: 200, quantization: Quantization::Scalar8 }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<(), IndexError> {
        let err = |m: String| Err(IndexError::InvalidConfig(m));
        if self.num_partitions == 0 {
            return err("num_partitions must be positive".into());
        }
        if self.nprobe == 0 || self.nprobe > self.num_partitions {
            return err(format!("nprobe must be in 1..={}, got {}", self.num_partitions, self.nprobe));
        }
        if !(1..=2).contains(&self.spill) {
            return err(format!("spill must be 1 or 2, got {}", self.spill));
        }
        if self.spill > self.num_partitions {
            return err("spill exceeds num_partitions".into());
        }
        if self.rescore_budget == 0 {
            return err("rescore_budget must be positive".into());
        }
        Ok(())
    }
}

/// Per-query overrides of the index's configured scan parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOverrides {
    pub nprobe: Option<usize>,
    pub rescore_budget: Option<usize>,
}

impl SearchOverrides {
    /// Scan every partition and rescore every candidate.
    pub fn exhaustive() -> Self {
        Self { nprobe: Some(usize::MAX), rescore_budget: Some(usize::MAX) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorEntry {
    pub chunk_id: ChunkId,
    pub vector: EmbeddingVector,
    pub attributes: AttributeSet,
}

impl VectorEntry {
    pub fn note_id(&self) -> NoteId {
        self.chunk_id.note
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub chunk_id: ChunkId,
    pub note_id: NoteId,
    pub score: f64,
    pub patient_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertReport {
    pub inserted: usize,
    pub generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericBounds {
    pub min: f64,
    pub max: f64,
}

/// Distinct categorical tokens and numeric extents present in an index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categorical: BTreeMap<CategoricalField, Vec<String>>,
    pub numeric: BTreeMap<NumericField, Option<NumericBounds>>,
}

/// Read side shared by the in-memory and on-disk indexes.
pub trait VectorIndex: Send + Sync {
    fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &FilterSpec,
        overrides: SearchOverrides,
    ) -> Result<Vec<SearchResult>, IndexError>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize;

    fn is_trained(&self) -> bool;

    /// Bumped by every non-empty insertion batch.
    fn generation(&self) -> u64;

    fn vocabulary(&self) -> Vocabulary;
}

/// An in-memory index behind a single-writer lock. Searches hold the read lock
/// for their whole duration, so a search never observes half of an insertion batch.
#[derive(Debug)]
pub struct SharedIndex {
    inner: RwLock<PartitionedIndex>,
}

impl SharedIndex {
    pub fn new(index: PartitionedIndex) -> Arc<Self> {
        Arc::new(Self { inner: RwLock::new(index) })
    }

    pub fn read(&self) -> RwLockReadGuard<'_, PartitionedIndex> {
        self.inner.read()
    }

    pub fn insert(&self, entries: Vec<VectorEntry>) -> Result<InsertReport, IndexError> {
        self.inner.write().insert(entries)
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.inner.read().contains(id)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), IndexError> {
        save(&self.inner.read(), path)
    }
}

impl VectorIndex for SharedIndex {
    fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &FilterSpec,
        overrides: SearchOverrides,
    ) -> Result<Vec<SearchResult>, IndexError> {
        self.inner.read().search(query, k, filter, overrides)
    }

    fn len(&self) -> usize {
        self.inner.read().len()
    }

    fn dim(&self) -> usize {
        self.inner.read().dim()
    }

    fn is_trained(&self) -> bool {
        self.inner.read().is_trained()
    }

    fn generation(&self) -> u64 {
        self.inner.read().generation()
    }

    fn vocabulary(&self) -> Vocabulary {
        self.inner.read().vocabulary()
    }
}
