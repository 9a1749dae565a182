use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a clinical note. Note ids are non-negative decimal integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoteId(pub u64);

impl fmt::Display for NoteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for NoteId {
    fn from(v: u64) -> Self {
        NoteId(v)
    }
}

/// Identifier of one chunk: the owning note plus the chunk's 0-based ordinal.
///
/// Ordering is `(note, ordinal)`; search ties are broken on this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId {
    pub note: NoteId,
    pub ordinal: u32,
}

impl ChunkId {
    pub fn new(note: impl Into<NoteId>, ordinal: u32) -> Self {
        Self { note: note.into(), ordinal }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.note, self.ordinal)
    }
}
